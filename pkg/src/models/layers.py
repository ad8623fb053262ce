"""Network building blocks shared by the codec, encoder and decoder"""
import torch
import torch.nn as nn
import torch.nn.functional as F


class CNRBlock(nn.Module):
    """3×3 Conv → BatchNorm → ReLU (dilation optional, used by the RSU blocks)"""

    def __init__(self, in_ch, out_ch, dilation=1):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=dilation, dilation=dilation)
        self.norm = nn.BatchNorm2d(out_ch)
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x):
        return self.relu(self.norm(self.conv(x)))


def upsample_like(src, tar):
    return F.interpolate(src, size=tar.shape[2:], mode='bilinear', align_corners=False)


class UNet(nn.Module):
    """Plain U-Net: max-pool down, nearest-neighbour up, concatenated skips.

    Input height/width must be divisible by 2**depth.
    """

    def __init__(self, in_channels, out_channels, depth=4, base_channels=32, max_channels=256):
        super().__init__()
        self.depth = depth
        widths = [min(base_channels * 2 ** i, max_channels) for i in range(depth + 1)]

        self.inc = nn.Sequential(CNRBlock(in_channels, widths[0]), CNRBlock(widths[0], widths[0]))
        self.down = nn.ModuleList([
            nn.Sequential(nn.MaxPool2d(2), CNRBlock(widths[i], widths[i + 1]), CNRBlock(widths[i + 1], widths[i + 1]))
            for i in range(depth)
        ])
        self.up = nn.ModuleList([
            nn.Sequential(CNRBlock(widths[i + 1] + widths[i], widths[i]), CNRBlock(widths[i], widths[i]))
            for i in reversed(range(depth))
        ])
        self.head = nn.Conv2d(widths[0], out_channels, 1)

    def forward(self, x):
        factor = 2 ** self.depth
        if x.shape[-2] % factor or x.shape[-1] % factor:
            raise ValueError(f"spatial size {tuple(x.shape[-2:])} not divisible by {factor}")
        skips = [self.inc(x)]
        for block in self.down:
            skips.append(block(skips[-1]))
        hx = skips.pop()
        for block in self.up:
            skip = skips.pop()
            hx = F.interpolate(hx, size=skip.shape[2:], mode='nearest')
            hx = block(torch.cat((hx, skip), 1))
        return self.head(hx)


class RSU(nn.Module):
    """Residual U-block of the given height (inner U-Net wrapped in a residual connection)"""

    def __init__(self, height, in_ch, mid_ch, out_ch):
        super().__init__()
        if height < 2:
            raise ValueError("RSU height must be >= 2")
        self.conv_in = CNRBlock(in_ch, out_ch)
        self.encoders = nn.ModuleList(
            [CNRBlock(out_ch, mid_ch)] + [CNRBlock(mid_ch, mid_ch) for _ in range(height - 2)]
        )
        self.bottom = CNRBlock(mid_ch, mid_ch, dilation=2)
        self.decoders = nn.ModuleList(
            [CNRBlock(2 * mid_ch, mid_ch) for _ in range(height - 2)] + [CNRBlock(2 * mid_ch, out_ch)]
        )
        self.pool = nn.MaxPool2d(2, stride=2, ceil_mode=True)

    def forward(self, x):
        hxin = self.conv_in(x)
        feats = []
        hx = hxin
        for i, encoder in enumerate(self.encoders):
            if i:
                hx = self.pool(hx)
            hx = encoder(hx)
            feats.append(hx)
        hx = self.bottom(hx)
        for decoder, skip in zip(self.decoders, reversed(feats)):
            if hx.shape[2:] != skip.shape[2:]:
                hx = upsample_like(hx, skip)
            hx = decoder(torch.cat((hx, skip), 1))
        return hx + hxin


class NestedUNet(nn.Module):
    """Two-level U-inside-U network (reduced U²-Net) returning single-channel logits"""

    def __init__(self, in_ch=3, out_ch=1, stages=3, height=4, mid_ch=8, channels=16):
        super().__init__()
        heights = [max(height - i, 2) for i in range(stages)]
        self.encoders = nn.ModuleList(
            [RSU(heights[i], in_ch if i == 0 else channels, mid_ch, channels) for i in range(stages)]
        )
        self.decoders = nn.ModuleList(
            [RSU(heights[i], 2 * channels, mid_ch, channels) for i in reversed(range(stages - 1))]
        )
        self.sides = nn.ModuleList([nn.Conv2d(channels, out_ch, 3, padding=1) for _ in range(stages)])
        self.fuse = nn.Conv2d(stages * out_ch, out_ch, 1)
        self.pool = nn.MaxPool2d(2, stride=2, ceil_mode=True)

    def forward(self, x):
        feats = []
        hx = x
        for i, encoder in enumerate(self.encoders):
            if i:
                hx = self.pool(hx)
            hx = encoder(hx)
            feats.append(hx)

        outputs = [hx]
        for decoder, skip in zip(self.decoders, reversed(feats[:-1])):
            hx = decoder(torch.cat((upsample_like(hx, skip), skip), 1))
            outputs.append(hx)

        sides = [upsample_like(side(out), x) for side, out in zip(self.sides, outputs)]
        return self.fuse(torch.cat(sides, 1))
