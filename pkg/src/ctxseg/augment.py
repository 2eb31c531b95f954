"""Image and text augmentations with an image-text concordance contract.

Every default transform leaves the truth of the report's side/zone/presence
statements intact: photometric edits touch intensities only, and the warps
are bounded so a mask never migrates across the midline. Horizontal flip is
the deliberate exception; it mirrors pixels while leaving the report alone
and exists only for the concordance-breaking ablation (p_hflip defaults 0).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from .data import Sample
from .errors import RejectedSample
from .util import mix64, rng_from

_SALT_AUG = 0xA06
_SALT_RETRY = 0xA5E7

DEFAULT_LEXICON = {
    "pneumothorax": ["ptx"],
    "normal": ["unremarkable"],
    "seen": ["identified"],
}

_SENTENCE_RE = re.compile(r"[^.!?]*[.!?]|[^.!?]+$")
_TOKEN_RE = re.compile(r"^(\W*)(.*?)(\W*)$", re.DOTALL)


@dataclass
class AugmentPolicy:
    p_photometric: float = 0.3
    p_distort: float = 0.3
    p_ssr: float = 0.5
    p_hflip: float = 0.0
    text_shuffle: bool = False
    text_synonym_p: float = 0.0
    brightness_max: float = 0.2
    contrast_range: tuple = (0.8, 1.2)
    gamma_range: tuple = (0.8, 1.25)
    elastic_alpha: float = 2.5
    elastic_sigma: float = 6.0
    grid_cells: int = 4
    grid_jitter: float = 0.15
    optical_k_max: float = 0.15
    ssr_shift_max: float = 0.06
    ssr_scale: tuple = (0.9, 1.1)
    ssr_rot_max: float = 10.0
    lexicon: dict | None = None

    def __post_init__(self):
        for name in ("p_photometric", "p_distort", "p_ssr", "p_hflip",
                     "text_synonym_p"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0,1], got {v}")


def hflip(sample: Sample) -> Sample:
    """Mirror image and mask about the vertical axis; report stays as written."""
    return replace(sample,
                   image=np.ascontiguousarray(sample.image[:, ::-1]),
                   mask=np.ascontiguousarray(sample.mask[:, ::-1]))


def photometric(image: np.ndarray, kind: str, magnitude: float) -> np.ndarray:
    """Intensity-only edit of an image in [0,1]; mask and report untouched."""
    if kind == "brightness":
        if not -0.2 <= magnitude <= 0.2:
            raise ValueError(f"brightness delta {magnitude} outside [-0.2, 0.2]")
        return np.clip(image + np.float32(magnitude), 0.0, 1.0)
    if kind == "contrast":
        if not 0.8 <= magnitude <= 1.2:
            raise ValueError(f"contrast factor {magnitude} outside [0.8, 1.2]")
        mu = image.mean(dtype=np.float64)
        return np.clip(mu + magnitude * (image - mu), 0.0, 1.0).astype(np.float32)
    if kind == "gamma":
        if not 0.8 <= magnitude <= 1.25:
            raise ValueError(f"gamma {magnitude} outside [0.8, 1.25]")
        return np.power(image, np.float32(magnitude))
    raise ValueError(f"unknown photometric kind {kind!r}")


def _warp(sample: Sample, coords: np.ndarray, area_factor: float) -> Sample:
    """Apply one inverse coordinate map to image (bilinear) and mask (nearest).

    Raises RejectedSample when more than 25% of the expected mask mass is
    lost, which at these magnitudes means the mask ran out of frame.
    """
    image = map_coordinates(sample.image, coords, order=1, mode="nearest")
    mask = map_coordinates(sample.mask, coords, order=0, mode="constant", cval=0)
    before = float(sample.mask.sum())
    if before > 0:
        expected = before * area_factor
        if float(mask.sum()) < 0.75 * expected:
            raise RejectedSample(
                f"warp kept {mask.sum():.0f} of {expected:.0f} expected mask pixels")
    return replace(sample, image=image.astype(np.float32),
                   mask=mask.astype(np.uint8))


def geometric_distort(sample: Sample, kind: str, params: dict, rng) -> Sample:
    """Warp image and mask with one shared displacement; report untouched."""
    s = sample.image.shape[0]
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    area_factor = 1.0

    if kind == "elastic":
        alpha, sigma = params["alpha"], params["sigma"]
        dy = gaussian_filter(rng.uniform(-1, 1, (s, s)), sigma) * alpha
        dx = gaussian_filter(rng.uniform(-1, 1, (s, s)), sigma) * alpha
        coords = np.stack([yy + dy, xx + dx])
    elif kind == "grid":
        cells, jitter = params["cells"], params["jitter"]
        cell = s / cells
        nodes_y = rng.uniform(-jitter, jitter, (cells + 1, cells + 1)) * cell
        nodes_x = rng.uniform(-jitter, jitter, (cells + 1, cells + 1)) * cell
        node_pos = np.stack([yy / cell, xx / cell])
        dy = map_coordinates(nodes_y, node_pos, order=1, mode="nearest")
        dx = map_coordinates(nodes_x, node_pos, order=1, mode="nearest")
        coords = np.stack([yy + dy, xx + dx])
    elif kind == "optical":
        k = params["k"]
        c = (s - 1) / 2.0
        rn2 = (((xx - c) / c) ** 2 + ((yy - c) / c) ** 2)
        factor = 1.0 + k * rn2
        coords = np.stack([c + (yy - c) * factor, c + (xx - c) * factor])
    elif kind == "ssr":
        sh_x = params["shift_x"] * s
        sh_y = params["shift_y"] * s
        sc = params["scale"]
        th = np.deg2rad(params["rot"])
        c = (s - 1) / 2.0
        py = (yy - c - sh_y) / sc
        px = (xx - c - sh_x) / sc
        cos_t, sin_t = np.cos(-th), np.sin(-th)
        coords = np.stack([c + px * sin_t + py * cos_t,
                           c + px * cos_t - py * sin_t])
        area_factor = sc * sc
    else:
        raise ValueError(f"unknown distortion kind {kind!r}")

    return _warp(sample, coords, area_factor)


def sentence_shuffle(text: str, rng) -> str:
    """Randomly reorder sentences, keeping each delimiter with its sentence."""
    parts = [p.strip() for p in _SENTENCE_RE.findall(text) if p.strip()]
    if len(parts) < 2:
        return text
    order = rng.permutation(len(parts))
    return " ".join(parts[i] for i in order)


def synonym_replace(text: str, lexicon: dict, p: float, rng) -> str:
    """Swap lexicon terms for a listed synonym, each independently with prob p."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"replacement probability {p} outside [0,1]")
    out = []
    for token in text.split():
        pre, core, post = _TOKEN_RE.match(token).groups()
        syns = lexicon.get(core.lower())
        if syns and rng.random() < p:
            token = pre + syns[int(rng.integers(len(syns)))] + post
        out.append(token)
    return " ".join(out)


def _augment_once(sample: Sample, policy: AugmentPolicy, seed: int) -> Sample:
    rng = rng_from(seed, _SALT_AUG)
    out = sample
    if rng.random() < policy.p_hflip:
        out = hflip(out)
    if rng.random() < policy.p_photometric:
        kind = ("contrast", "gamma", "brightness")[int(rng.integers(3))]
        if kind == "brightness":
            mag = rng.uniform(-policy.brightness_max, policy.brightness_max)
        elif kind == "contrast":
            mag = rng.uniform(*policy.contrast_range)
        else:
            mag = rng.uniform(*policy.gamma_range)
        out = replace(out, image=photometric(out.image, kind, mag))
    if rng.random() < policy.p_distort:
        kind = ("elastic", "grid", "optical")[int(rng.integers(3))]
        params = {
            "elastic": {"alpha": policy.elastic_alpha, "sigma": policy.elastic_sigma},
            "grid": {"cells": policy.grid_cells, "jitter": policy.grid_jitter},
            "optical": {"k": rng.uniform(-policy.optical_k_max, policy.optical_k_max)},
        }[kind]
        out = geometric_distort(out, kind, params, rng)
    if rng.random() < policy.p_ssr:
        params = {
            "shift_x": rng.uniform(-policy.ssr_shift_max, policy.ssr_shift_max),
            "shift_y": rng.uniform(-policy.ssr_shift_max, policy.ssr_shift_max),
            "scale": rng.uniform(*policy.ssr_scale),
            "rot": rng.uniform(-policy.ssr_rot_max, policy.ssr_rot_max),
        }
        out = geometric_distort(out, "ssr", params, rng)
    report = out.report
    if policy.text_shuffle:
        report = sentence_shuffle(report, rng)
    if policy.text_synonym_p > 0:
        lex = policy.lexicon if policy.lexicon is not None else DEFAULT_LEXICON
        report = synonym_replace(report, lex, policy.text_synonym_p, rng)
    return replace(out, report=report)


def augment_sample(sample: Sample, policy: AugmentPolicy, seed: int) -> Sample:
    """Full per-sample pipeline, a pure function of (sample, policy, seed).

    A warp that rejects is retried once under a derived seed; a second
    rejection passes the sample through unaugmented.
    """
    for attempt in (seed, mix64(seed, _SALT_RETRY)):
        try:
            return _augment_once(sample, policy, attempt)
        except RejectedSample:
            continue
    return sample


def load_lexicon(path) -> dict:
    import json
    with open(path) as f:
        lex = json.load(f)
    return {str(k).lower(): [str(s) for s in v] for k, v in lex.items()}
