import dataclasses
from pathlib import Path
from typing import Tuple

import numpy as np
from PIL import Image, ImageEnhance, ImageFilter
from pydantic import BaseModel

from ..models import CropError, PairRecord

RGB_FILL = (128, 128, 128)


class AugmentConfig(BaseModel):
    """Amplitudes of the training-time augmentations. All zero = identity."""
    hue: float = 0.05               # max hue shift, fraction of the colour wheel
    brightness: float = 0.3         # factor drawn from [1 - b, 1 + b]
    contrast: float = 0.3
    right_angle_rotation: bool = True
    rotation_deg: float = 10.0      # extra continuous rotation in [-r, r]
    hflip_p: float = 0.5
    vflip_p: float = 0.5
    blur_sigma_max: float = 1.0

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(hue=0.0, brightness=0.0, contrast=0.0, right_angle_rotation=False,
                   rotation_deg=0.0, hflip_p=0.0, vflip_p=0.0, blur_sigma_max=0.0)


class ImageService:
    # --- PNG IO ---

    @staticmethod
    def save_rgb(rgb: np.ndarray, path: Path):
        Image.fromarray(np.ascontiguousarray(rgb, dtype=np.uint8), "RGB").save(path, format="PNG")

    @staticmethod
    def save_instance(instance: np.ndarray, path: Path):
        # part id as 16-bit gray value
        Image.fromarray(np.ascontiguousarray(instance, dtype=np.uint16)).save(path, format="PNG")

    @staticmethod
    def save_mask(mask: np.ndarray, path: Path):
        Image.fromarray((np.asarray(mask, dtype=np.uint8) * 255), "L").save(path, format="PNG")

    @staticmethod
    def load_rgb(path: Path) -> np.ndarray:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8).copy()

    @staticmethod
    def load_instance(path: Path) -> np.ndarray:
        with Image.open(path) as img:
            return np.asarray(img).astype(np.uint16)

    @staticmethod
    def load_mask(path: Path) -> np.ndarray:
        with Image.open(path) as img:
            return (np.asarray(img.convert("L")) > 127).astype(np.uint8)

    # --- ROI crop ---

    @staticmethod
    def crop_support(record: PairRecord) -> np.ndarray:
        # anchor object, sample state drawn at the anchor pose, every change pixel
        return (record.anchor.instance != 0) | (record.aligned_instance != 0) | (record.mask != 0)

    @staticmethod
    def crop_window(support: np.ndarray, margin_frac: float, rng: np.random.Generator = None,
                    translate: bool = True) -> Tuple[int, int, int, int]:
        """
        Tight bounding box of the nonzero support pixels grown by margin_frac per
        side length, clamped to the image, then shifted at random while the tight
        box stays inside. Returns (row0, col0, height, width).
        """
        if margin_frac < 0:
            raise ValueError(f"margin_frac must be >= 0, got {margin_frac}")
        rows = np.flatnonzero(support.any(axis=1))
        cols = np.flatnonzero(support.any(axis=0))
        if rows.size == 0:
            raise CropError("no object pixels in the crop support")
        r0, r1 = int(rows[0]), int(rows[-1])
        c0, c1 = int(cols[0]), int(cols[-1])
        img_h, img_w = support.shape

        def place(lo, hi, limit):
            extent = hi - lo + 1
            side = min(int(np.ceil(extent * (1.0 + margin_frac) - 1e-9)), limit)
            first = max(0, hi + 1 - side)
            last = min(lo, limit - side)
            if translate and rng is not None and last > first:
                return int(rng.integers(first, last + 1)), side
            centred = lo - (side - extent) // 2
            return int(min(max(centred, first), last)), side

        row0, height = place(r0, r1, img_h)
        col0, width = place(c0, c1, img_w)
        return row0, col0, height, width

    @staticmethod
    def _nearest(arr: np.ndarray, window, out_size: int) -> np.ndarray:
        row0, col0, height, width = window
        rows = row0 + np.floor((np.arange(out_size) + 0.5) * height / out_size).astype(np.int64)
        cols = col0 + np.floor((np.arange(out_size) + 0.5) * width / out_size).astype(np.int64)
        return arr[np.ix_(rows, cols)]

    @staticmethod
    def _bilinear(rgb: np.ndarray, window, out_size: int) -> np.ndarray:
        row0, col0, height, width = window
        img = Image.fromarray(rgb, "RGB").crop((col0, row0, col0 + width, row0 + height))
        return np.asarray(img.resize((out_size, out_size), Image.Resampling.BILINEAR), dtype=np.uint8).copy()

    @staticmethod
    def roi_crop(record: PairRecord, margin_frac: float, rng: np.random.Generator, out_size: int,
                 translate: bool = True) -> PairRecord:
        """
        Crop anchor, sample, mask and both instance maps with one window derived
        from the box of crop_support, then resample to out_size (bilinear for
        colour, nearest for labels). No change pixel falls outside the window.
        """
        window = ImageService.crop_window(ImageService.crop_support(record), margin_frac, rng, translate)
        near = lambda a: ImageService._nearest(a, window, out_size)

        def crop_view(view):
            return dataclasses.replace(
                view,
                rgb=ImageService._bilinear(view.rgb, window, out_size),
                instance=near(view.instance),
                depth=None if view.depth is None else near(view.depth),
            )

        return dataclasses.replace(
            record,
            anchor=crop_view(record.anchor),
            sample=crop_view(record.sample),
            mask=near(record.mask),
            aligned_instance=near(record.aligned_instance),
            crop_window=window,
        )

    # --- Augmentation ---

    @staticmethod
    def _photometric(rgb: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
        hue = rng.uniform(-cfg.hue, cfg.hue)
        brightness = 1.0 + rng.uniform(-cfg.brightness, cfg.brightness)
        contrast = 1.0 + rng.uniform(-cfg.contrast, cfg.contrast)
        sigma = rng.uniform(0.0, cfg.blur_sigma_max)

        img = Image.fromarray(rgb, "RGB")
        changed = False
        if hue != 0.0:
            h, s, v = img.convert("HSV").split()
            shift = int(round(hue * 255)) % 256
            h = h.point(lambda x: (x + shift) % 256)
            img = Image.merge("HSV", (h, s, v)).convert("RGB")
            changed = True
        if brightness != 1.0:
            img = ImageEnhance.Brightness(img).enhance(brightness)
            changed = True
        if contrast != 1.0:
            img = ImageEnhance.Contrast(img).enhance(contrast)
            changed = True
        if sigma > 0.0:
            img = img.filter(ImageFilter.GaussianBlur(radius=sigma))
            changed = True
        return np.asarray(img, dtype=np.uint8).copy() if changed else rgb

    @staticmethod
    def _geometric(arr: np.ndarray, quarter_turns: int, angle: float, hflip: bool, vflip: bool,
                   label: bool) -> np.ndarray:
        out = arr
        if quarter_turns:
            out = np.rot90(out, quarter_turns, axes=(0, 1))
        if angle != 0.0:
            if label:
                img = Image.fromarray(np.ascontiguousarray(out.astype(np.int32)), "I")
                img = img.rotate(angle, resample=Image.Resampling.NEAREST, fillcolor=0)
                out = np.asarray(img).astype(arr.dtype)
            else:
                img = Image.fromarray(np.ascontiguousarray(out), "RGB")
                img = img.rotate(angle, resample=Image.Resampling.BILINEAR, fillcolor=RGB_FILL)
                out = np.asarray(img, dtype=np.uint8)
        if hflip:
            out = out[:, ::-1]
        if vflip:
            out = out[::-1, :]
        return np.ascontiguousarray(out) if out is not arr else arr

    @staticmethod
    def augment_pair(record: PairRecord, cfg: AugmentConfig, rng: np.random.Generator) -> PairRecord:
        """
        One shared geometric transform for anchor, sample, mask and label maps;
        independent photometric jitter and blur per image. Every draw happens
        whether or not its amplitude is zero, so streams stay aligned.
        """
        quarter_turns = int(rng.integers(4)) if cfg.right_angle_rotation else 0
        angle = float(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg))
        hflip = bool(rng.random() < cfg.hflip_p)
        vflip = bool(rng.random() < cfg.vflip_p)
        geo = dict(quarter_turns=quarter_turns, angle=angle, hflip=hflip, vflip=vflip)
        moved = bool(quarter_turns or angle != 0.0 or hflip or vflip)

        def transform_view(view):
            rgb = ImageService._geometric(view.rgb, label=False, **geo)
            rgb = ImageService._photometric(rgb, cfg, rng)
            return dataclasses.replace(
                view,
                rgb=rgb,
                instance=ImageService._geometric(view.instance, label=True, **geo),
                depth=None if moved else view.depth,
            )

        anchor = transform_view(record.anchor)
        sample = transform_view(record.sample)
        return dataclasses.replace(
            record,
            anchor=anchor,
            sample=sample,
            mask=ImageService._geometric(record.mask, label=True, **geo),
            aligned_instance=ImageService._geometric(record.aligned_instance, label=True, **geo),
        )
