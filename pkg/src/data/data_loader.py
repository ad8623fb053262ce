# Image dataset ingestion, normalisation and image file I/O
import logging
from pathlib import Path

import numpy as np
import torch
import torchvision.transforms.functional as TF
from PIL import Image, PngImagePlugin
from torch.utils.data import DataLoader, Dataset, Sampler
from torchvision.transforms import InterpolationMode

from config.settings import IMAGE_EXTENSIONS
from src.utils.helpers import DatasetError

logger = logging.getLogger(__name__)


def normalize(array):
    """uint8 H×W×C array (or PIL image) → float C×H×W tensor in [-1, 1]"""
    array = np.asarray(array, dtype=np.float32)
    if array.ndim == 2:
        array = array[:, :, None]
    return torch.from_numpy(array.copy()).permute(2, 0, 1) / 127.5 - 1.0


def denormalize(tensor):
    """C×H×W tensor in [-1, 1] → uint8 H×W×C array"""
    tensor = tensor.detach().cpu().float()
    if tensor.dim() == 4:
        if tensor.shape[0] != 1:
            raise ValueError("denormalize expects a single image")
        tensor = tensor[0]
    array = ((tensor.clamp(-1.0, 1.0) + 1.0) * 127.5).round().to(torch.uint8)
    return array.permute(1, 2, 0).numpy()


def resize_and_crop(img, size):
    """Resize the short side to ``size`` then center-crop to size×size"""
    img = TF.resize(img, size, interpolation=InterpolationMode.BILINEAR, antialias=True)
    return TF.center_crop(img, [size, size])


def load_image(path, size=None):
    """Read a PNG/JPEG file as a 3×H×W tensor in [-1, 1], optionally resized and cropped"""
    path = Path(path)
    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
            if size is not None:
                img = resize_and_crop(img, size)
            return normalize(img)
    except OSError as e:
        raise DatasetError(f"cannot decode image {path}: {e}") from e


def save_image(tensor, path, provenance=None):
    """Write a 3×H×W tensor as an 8-bit image; PNG files carry ``provenance`` as text chunks"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = Image.fromarray(denormalize(tensor), mode="RGB")
    if path.suffix.lower() == ".png":
        info = PngImagePlugin.PngInfo()
        for key, value in (provenance or {}).items():
            info.add_text(f"maskwm:{key}", str(value))
        img.save(path, pnginfo=info)
    else:
        img.save(path, quality=95)
    return path


def read_provenance(path):
    """Text chunks written by save_image, without the key prefix"""
    with Image.open(path) as img:
        text = getattr(img, "text", {}) or {}
    return {k.split(":", 1)[1]: v for k, v in text.items() if k.startswith("maskwm:")}


def _is_decodable(path):
    # full decode; verify() alone misses truncated pixel data
    try:
        with Image.open(path) as img:
            img.convert("RGB")
        return True
    except Exception:
        return False


class ImageDataset(Dataset):
    """Directory of PNG/JPEG images emitted as 3×S×S tensors in [-1, 1].

    Files are indexed once (sorted, undecodable ones skipped and counted) and
    decoded lazily. Iteration order for an epoch is a pure function of
    (index, seed, epoch).
    """

    def __init__(self, root, target_size, seed=0):
        self.root = Path(root)
        self.target_size = int(target_size)
        self.seed = int(seed)
        if not self.root.is_dir():
            raise DatasetError(f"dataset directory not found: {self.root}")

        candidates = sorted(p for p in self.root.rglob("*") if p.suffix.lower() in IMAGE_EXTENSIONS)
        self.files = []
        self.skipped = 0
        for path in candidates:
            if _is_decodable(path):
                self.files.append(path)
            else:
                self.skipped += 1
                logger.warning(f"Skipping undecodable image {path}")
        if not self.files:
            raise DatasetError(f"no decodable images in {self.root}")
        logger.info(f"Indexed {len(self.files)} images from {self.root} ({self.skipped} skipped)")

    def __len__(self):
        return len(self.files)

    def __getitem__(self, idx):
        return load_image(self.files[idx], self.target_size)

    def order(self, epoch):
        return np.random.default_rng([self.seed, int(epoch)]).permutation(len(self.files))

    def __iter__(self):
        for idx in self.order(0):
            yield self[int(idx)]


def load_dataset(root, target_size, seed=0):
    return ImageDataset(root, target_size, seed)


class StepSampler(Sampler):
    """Endless index stream over successive epoch orders, starting at ``start_step`` batches in.

    Batch k always receives the same indices, so a resumed run reads exactly
    the images an uninterrupted run would have read.
    """

    def __init__(self, dataset, batch_size, start_step=0):
        self.dataset = dataset
        self.batch_size = batch_size
        self.start_step = start_step

    def __iter__(self):
        n = len(self.dataset)
        position = self.start_step * self.batch_size
        epoch, offset = divmod(position, n)
        while True:
            order = self.dataset.order(epoch)
            for idx in order[offset:]:
                yield int(idx)
            epoch += 1
            offset = 0


def make_loader(dataset, batch_size, start_step=0, num_workers=0, prefetch_factor=2):
    """Batches of images in training order; worker processes decode ahead of the training loop"""
    kwargs = {}
    if num_workers > 0:
        kwargs = {'prefetch_factor': prefetch_factor, 'persistent_workers': True}
    return DataLoader(
        dataset,
        batch_size=batch_size,
        sampler=StepSampler(dataset, batch_size, start_step),
        num_workers=num_workers,
        drop_last=True,
        **kwargs,
    )
