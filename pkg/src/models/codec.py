"""Bit-message codec: message ↔ spatial feature map, logits → bits, text encodings"""
import logging

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from src.models.layers import CNRBlock
from src.utils.helpers import MessageLengthError

logger = logging.getLogger(__name__)


def sample_message(l, rng):
    """l independent fair bits as a float tensor"""
    if l < 1:
        raise ValueError("message length must be >= 1")
    return torch.from_numpy(rng.integers(0, 2, size=l).astype(np.float32))


def sample_messages(batch_size, l, rng):
    if l < 1:
        raise ValueError("message length must be >= 1")
    return torch.from_numpy(rng.integers(0, 2, size=(batch_size, l)).astype(np.float32))


class MessageEncoder(nn.Module):
    """Linear l → l², reshape to 1×l×l, bilinear upsample to H×W, CNR blocks → C_f×H×W"""

    def __init__(self, message_length, feature_channels=16, n_blocks=3):
        super().__init__()
        self.message_length = message_length
        self.feature_channels = feature_channels
        self.linear = nn.Linear(message_length, message_length * message_length)
        blocks = [CNRBlock(1, feature_channels)]
        blocks += [CNRBlock(feature_channels, feature_channels) for _ in range(n_blocks - 1)]
        self.blocks = nn.Sequential(*blocks)

    def forward(self, msg, height, width):
        if msg.dim() == 1:
            msg = msg[None]
        if msg.shape[-1] != self.message_length:
            raise MessageLengthError(
                f"message length {msg.shape[-1]} does not match codec length {self.message_length}")
        l = self.message_length
        grid = self.linear(msg).view(-1, 1, l, l)
        grid = F.interpolate(grid, size=(height, width), mode='bilinear', align_corners=False)
        return self.blocks(grid)


class MessageDecoder(nn.Module):
    """CNR blocks → 1 channel → resample to l×l → linear layers → l logits"""

    def __init__(self, message_length, feature_channels=16, n_blocks=3):
        super().__init__()
        self.message_length = message_length
        self.feature_channels = feature_channels
        self.blocks = nn.Sequential(*[CNRBlock(feature_channels, feature_channels) for _ in range(n_blocks)])
        self.project = nn.Conv2d(feature_channels, 1, 1)
        l = message_length
        self.head = nn.Sequential(nn.Linear(l * l, 2 * l), nn.ReLU(inplace=True), nn.Linear(2 * l, l))

    def forward(self, features):
        if features.shape[1] != self.feature_channels:
            raise ValueError(
                f"expected {self.feature_channels} feature channels, got {features.shape[1]}")
        l = self.message_length
        hx = self.project(self.blocks(features))
        # area interpolation: every pixel contributes to the l×l grid
        hx = F.interpolate(hx, size=(l, l), mode='area')
        return self.head(hx.flatten(1))


def message_to_feature(msg, height, width, encoder):
    """Message bits (l or B×l) to a B×C_f×H×W feature map"""
    return encoder(msg, height, width)


def feature_to_logits(features, decoder):
    """B×C_f×H×W extractor features to B×l bit logits"""
    return decoder(features)


def bits_from_logits(logits, threshold=0.5):
    """bit = 1 iff logit > threshold (ties go to 0)"""
    return (logits > threshold).float()


def bit_accuracy(pred, gt):
    """Fraction of matching bit positions (averaged over every element for batches)"""
    pred = torch.as_tensor(pred)
    gt = torch.as_tensor(gt)
    if pred.shape != gt.shape:
        raise MessageLengthError(f"bit length mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    return float((pred.round() == gt.round()).float().mean())


def message_to_hex(bits):
    """Hex string, most-significant bit first, ceil(l/4) digits"""
    bits = [int(b) for b in torch.as_tensor(bits).flatten().round().tolist()]
    value = 0
    for b in bits:
        value = (value << 1) | b
    return format(value, f"0{(len(bits) + 3) // 4}x")


def message_to_binary(bits):
    return "".join(str(int(b)) for b in torch.as_tensor(bits).flatten().round().tolist())


def parse_message(text, l):
    """Parse a hex string (MSB first) or a '0b'-prefixed binary string into l bits"""
    text = text.strip().lower()
    if text.startswith("0b"):
        digits = text[2:]
        if len(digits) != l or set(digits) - {"0", "1"}:
            raise MessageLengthError(f"message length mismatch: got {len(digits)} binary digits, model expects {l}")
        return torch.tensor([float(c) for c in digits])

    if text.startswith("0x"):
        text = text[2:]
    try:
        value = int(text, 16)
    except ValueError as e:
        raise MessageLengthError(f"invalid hex message {text!r}") from e
    if len(text) != (l + 3) // 4 or value >= 2 ** l:
        raise MessageLengthError(f"message length mismatch: {len(text) * 4}-bit hex for a {l}-bit model")
    return torch.tensor([float((value >> (l - 1 - i)) & 1) for i in range(l)])
