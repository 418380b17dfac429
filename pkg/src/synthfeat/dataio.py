"""Training-target derivation and batch streaming.

Turns raw rendered samples into supervision: instance-contour maps with the
class-balance weight, log-depth, unit normals, and the validity mask that
gates every downstream loss. Also handles the grayscale input trick and
epoch-shuffled batch iteration over the on-disk dataset layout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import scenegen
from .scenegen import ImageSample


@dataclass
class TaskTargets:
    contour: np.ndarray    # H,W uint8 {0,1}
    beta: float            # fraction of non-edge pixels among valid ones
    log_depth: np.ndarray  # H,W float32, natural log of meters (0 where invalid)
    normal: np.ndarray     # H,W,3 float32 unit vectors
    valid: np.ndarray      # H,W bool


@dataclass
class Batch:
    inputs: torch.Tensor               # B,3,H,W float32
    targets: list[TaskTargets] | None  # None for the real domain
    domain: str


def extract_contours(instance: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
    """Mark a pixel 1 iff it is valid and any 4-neighbor has a different id.

    Background (id 0) counts as a different id, so object/background borders
    are contours; background pixels themselves are never marked.
    """
    inst = np.asarray(instance)
    if valid is None:
        valid = inst > 0
    diff = np.zeros(inst.shape, dtype=bool)
    diff[1:, :] |= inst[1:, :] != inst[:-1, :]
    diff[:-1, :] |= inst[:-1, :] != inst[1:, :]
    diff[:, 1:] |= inst[:, 1:] != inst[:, :-1]
    diff[:, :-1] |= inst[:, :-1] != inst[:, 1:]
    return (diff & valid).astype(np.uint8)


def compute_beta(contour: np.ndarray, valid: np.ndarray) -> float:
    """Fraction of non-edge pixels among valid ones (1.0 when edge-free)."""
    if contour[~valid].any():
        raise ValueError("contour pixels outside the valid region")
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("no valid pixels; degenerate sample")
    n_edge = int(contour[valid].sum())
    return (n_valid - n_edge) / n_valid


def to_log_depth(depth: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Natural log of depth on valid pixels; 0 elsewhere (masked downstream)."""
    depth = np.asarray(depth)
    if valid.any() and not (depth[valid] > 0).all():
        raise ValueError("non-positive depth inside the valid region")
    out = np.zeros(depth.shape, dtype=np.float32)
    out[valid] = np.log(depth[valid])
    return out


def grayscale_augment(rgb: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Replicate one uniformly chosen channel into all three (H,W,3 in [0,1])."""
    c = int(rng.integers(0, 3))
    return np.repeat(rgb[..., c:c + 1], 3, axis=-1)


def derive_targets(sample: ImageSample) -> TaskTargets:
    contour = extract_contours(sample.instance, sample.valid)
    beta = compute_beta(contour, sample.valid)
    return TaskTargets(
        contour=contour,
        beta=beta,
        log_depth=to_log_depth(sample.depth, sample.valid),
        normal=sample.normal,
        valid=sample.valid,
    )


# ---------------------------------------------------------------------------
# dataset access


def dataset_size(data_dir: Path) -> int:
    meta_path = Path(data_dir) / "meta.json"
    if meta_path.exists():
        with open(meta_path) as f:
            return int(json.load(f)["count"])
    # plain image folder (real domain)
    return len(_list_images(data_dir))


def _list_images(data_dir: Path) -> list[Path]:
    exts = {".png", ".jpg", ".jpeg"}
    return sorted(p for p in Path(data_dir).iterdir()
                  if p.suffix.lower() in exts)


def load_shape_labels(data_dir: Path) -> list[int]:
    with open(Path(data_dir) / "meta.json") as f:
        meta = json.load(f)
    if "shape_labels" not in meta:
        raise ValueError(f"{data_dir}: dataset carries no shape-class labels")
    return meta["shape_labels"]


class SampleSource:
    """Index-based access to one dataset directory (synthetic or real)."""

    def __init__(self, data_dir: Path, domain: str = "synthetic"):
        self.data_dir = Path(data_dir)
        if domain not in ("synthetic", "real"):
            raise ValueError(f"unknown domain {domain!r}")
        self.domain = domain
        if domain == "real":
            self._files = _list_images(self.data_dir)
            if not self._files and (self.data_dir / "rgb").is_dir():
                # rendered real-proxy dataset: images live under rgb/
                self._files = _list_images(self.data_dir / "rgb")
            self._count = len(self._files)
        else:
            self._count = dataset_size(self.data_dir)
        if self._count == 0:
            raise ValueError(f"{data_dir}: empty dataset")

    def __len__(self):
        return self._count

    def load_rgb(self, index: int) -> np.ndarray:
        if self.domain == "real":
            img = Image.open(self._files[index]).convert("RGB")
            return np.asarray(img, dtype=np.float32) / 255.0
        return scenegen.read_sample(self.data_dir, index).rgb

    def load(self, index: int) -> tuple[np.ndarray, TaskTargets | None]:
        if self.domain == "real":
            return self.load_rgb(index), None
        sample = scenegen.read_sample(self.data_dir, index)
        return sample.rgb, derive_targets(sample)


def collate(rgbs: list[np.ndarray], targets: list[TaskTargets] | None,
            domain: str) -> Batch:
    shapes = {r.shape for r in rgbs}
    if len(shapes) != 1:
        raise ValueError(f"resolution mismatch within batch: {sorted(shapes)}")
    inputs = torch.from_numpy(
        np.stack(rgbs).transpose(0, 3, 1, 2).astype(np.float32))
    return Batch(inputs=inputs, targets=targets, domain=domain)


def batch_stream(data_dir: Path, batch_size: int, shuffle_seed: int,
                 domain: str = "synthetic", grayscale: bool = False,
                 epochs: int = 1):
    """Yield epoch-shuffled batches; real-domain batches carry no targets.

    The per-epoch order is a pure function of (shuffle_seed, epoch), so two
    streams with the same seed produce identical batch sequences.
    """
    source = SampleSource(data_dir, domain)
    n = len(source)
    for epoch in range(epochs):
        order = np.random.default_rng((shuffle_seed, epoch)).permutation(n)
        aug_rng = np.random.default_rng((shuffle_seed, epoch, 1))
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            rgbs, targets = [], []
            for i in idx:
                rgb, tgt = source.load(int(i))
                if grayscale:
                    rgb = grayscale_augment(rgb, aug_rng)
                rgbs.append(rgb)
                targets.append(tgt)
            yield collate(rgbs, None if domain == "real" else targets, domain)


def targets_to_tensors(targets: list[TaskTargets], dtype=torch.float32):
    """Stack per-item targets into batched tensors for the loss functions."""
    contour = torch.from_numpy(np.stack([t.contour for t in targets])).to(dtype)
    beta = torch.tensor([t.beta for t in targets], dtype=dtype)
    log_depth = torch.from_numpy(np.stack([t.log_depth for t in targets])).to(dtype)
    normal = torch.from_numpy(
        np.stack([t.normal for t in targets]).transpose(0, 3, 1, 2)).to(dtype)
    valid = torch.from_numpy(np.stack([t.valid for t in targets]))
    return contour, beta, log_depth, normal, valid
