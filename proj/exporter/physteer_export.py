"""Export per-block activations of a pretrained video transformer as dump v1.

    python physteer_export.py export --model MCG-NJU/videomae-base --videos DIR \
        --labels labels.csv --layers all --out DUMP [--tokens]

labels.csv columns: id, plausibility, block, motion, split. The video for id X
is the first file in DIR whose stem is X.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger("physteer_export")

DUMP_VERSION = 1
BLOCKS = ("O1", "O2", "O3")
MOTIONS = ("left", "right")
SPLITS = ("train", "val", "test")


@dataclass
class VideoLabel:
    id: str
    plausibility: int
    block: str
    motion: str
    split: str

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "plausibility": self.plausibility,
            "block": self.block,
            "motion": self.motion,
            "split": self.split,
        }


@dataclass
class ExportConfig:
    model: str
    videos: Path
    labels: Path
    out: Path
    layers: str = "all"
    frames: int = 16
    size: int = 224
    tokens: bool = False


def read_labels(path: Path) -> list[VideoLabel]:
    out = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        missing = {"id", "plausibility", "block", "motion", "split"} - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            label = VideoLabel(
                id=row["id"].strip(),
                plausibility=int(row["plausibility"]),
                block=row["block"].strip(),
                motion=row["motion"].strip(),
                split=row["split"].strip(),
            )
            if label.plausibility not in (0, 1):
                raise ValueError(f"{label.id}: plausibility must be 0 or 1")
            if label.block not in BLOCKS or label.motion not in MOTIONS or label.split not in SPLITS:
                raise ValueError(f"{label.id}: bad block, motion or split")
            out.append(label)
    if not out:
        raise ValueError(f"{path}: no videos")
    return out


def parse_layers(spec: str, num_layers: int) -> list[int]:
    if spec == "all":
        return list(range(num_layers))
    layers = sorted({int(s) for s in spec.split(",")})
    if layers[0] < 0 or layers[-1] >= num_layers:
        raise ValueError(f"layers must lie in [0, {num_layers})")
    return layers


def find_video(videos: Path, vid: str) -> Path | None:
    for p in sorted(videos.iterdir()):
        if p.stem == vid and p.is_file():
            return p
    return None


def load_video(path: Path, frames: int, size: int) -> np.ndarray:
    """Uniformly resampled RGB frames, [T, size, size, 3] uint8."""
    import cv2

    cap = cv2.VideoCapture(str(path))
    raw = []
    while True:
        ok, frame = cap.read()
        if not ok:
            break
        raw.append(frame)
    cap.release()
    if not raw:
        raise ValueError(f"cannot decode {path}")
    idx = np.linspace(0, len(raw) - 1, frames).round().astype(int)
    out = [cv2.resize(cv2.cvtColor(raw[i], cv2.COLOR_BGR2RGB), (size, size), interpolation=cv2.INTER_AREA) for i in idx]
    return np.stack(out)


def find_blocks(model):
    """The ModuleList of transformer blocks."""
    for path in ("encoder.layer", "videomae.encoder.layer", "blocks", "encoder.layers"):
        obj = model
        try:
            for name in path.split("."):
                obj = getattr(obj, name)
        except AttributeError:
            continue
        return obj
    raise ValueError("cannot locate the transformer blocks of this model")


@dataclass
class BlockHooks:
    """Collects the output hidden states of selected blocks for one forward pass."""

    blocks: object
    layers: list[int]
    captured: dict = field(default_factory=dict)
    handles: list = field(default_factory=list)

    def __enter__(self):
        for l in self.layers:
            self.handles.append(self.blocks[l].register_forward_hook(self._hook(l)))
        return self

    def __exit__(self, *exc):
        for h in self.handles:
            h.remove()
        self.handles.clear()

    def _hook(self, layer):
        def fn(_module, _inputs, output):
            hidden = output[0] if isinstance(output, (tuple, list)) else output
            self.captured[layer] = hidden.detach().to("cpu", dtype=hidden.dtype)

        return fn


def pool(tokens: np.ndarray) -> np.ndarray:
    """Mean over all sequence positions, accumulated in float64."""
    return tokens.astype(np.float64).mean(axis=0).astype(np.float32)


def write_dump(out: Path, model_id: str, num_layers: int, videos: list[VideoLabel], pooled: dict,
               tokens: dict | None = None, extras: dict | None = None) -> None:
    """pooled[l]: [V, D] float32; tokens[l]: [V, N, D] float32."""
    out.mkdir(parents=True, exist_ok=True)
    manifest_path = out / "manifest.json"
    if manifest_path.exists():
        manifest_path.unlink()
    layers = sorted(pooled)
    dim = pooled[layers[0]].shape[1]
    token_count = 0
    for l in layers:
        p = np.ascontiguousarray(pooled[l], dtype="<f4")
        if p.shape != (len(videos), dim) or not np.isfinite(p).all():
            raise ValueError(f"layer {l}: pooled shape {p.shape} or non-finite values")
        p.tofile(out / f"pooled_l{l}.f32")
        if tokens is not None:
            t = np.ascontiguousarray(tokens[l], dtype="<f4")
            token_count = t.shape[1]
            if t.shape != (len(videos), token_count, dim):
                raise ValueError(f"layer {l}: token shape {t.shape}")
            t.tofile(out / f"tokens_l{l}.f32")
    manifest = {
        "version": DUMP_VERSION,
        "model_id": model_id,
        "num_layers": num_layers,
        "token_count": token_count,
        "dim": dim,
        "pooling": "mean",
        "layers": layers,
        "videos": [v.to_json() for v in videos],
    }
    manifest.update(extras or {})
    tmp = out / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2) + "\n")
    os.replace(tmp, manifest_path)


def export(cfg: ExportConfig) -> Path:
    import torch
    from transformers import AutoImageProcessor, AutoModel

    torch.manual_seed(0)
    torch.use_deterministic_algorithms(True)
    labels = read_labels(cfg.labels)
    model = AutoModel.from_pretrained(cfg.model).eval()
    for p in model.parameters():
        p.requires_grad_(False)
    try:
        processor = AutoImageProcessor.from_pretrained(cfg.model)
        mean = np.asarray(processor.image_mean, dtype=np.float32)
        std = np.asarray(processor.image_std, dtype=np.float32)
    except (OSError, ValueError, AttributeError):
        mean = np.array([0.485, 0.456, 0.406], dtype=np.float32)
        std = np.array([0.229, 0.224, 0.225], dtype=np.float32)

    blocks = find_blocks(model)
    num_layers = len(blocks)
    layers = parse_layers(cfg.layers, num_layers)
    kept: list[VideoLabel] = []
    notes: list[str] = []
    pooled = {l: [] for l in layers}
    toks = {l: [] for l in layers}
    shape = None
    for label in labels:
        path = find_video(cfg.videos, label.id)
        try:
            if path is None:
                raise ValueError(f"no video file for id {label.id}")
            frames = load_video(path, cfg.frames, cfg.size)
        except ValueError as e:
            log.warning("skipping %s: %s", label.id, e)
            notes.append(f"skipped {label.id}: {e}")
            continue
        x = (frames.astype(np.float32) / 255.0 - mean) / std
        x = torch.from_numpy(x).permute(0, 3, 1, 2).unsqueeze(0)  # [1, T, C, H, W]
        with BlockHooks(blocks, layers) as hooks, torch.no_grad():
            model(pixel_values=x)
        for l in layers:
            h = hooks.captured[l][0].to(torch.float32).numpy()
            if shape is None:
                shape = h.shape
            elif h.shape != shape:
                raise RuntimeError(f"{label.id} layer {l}: hidden shape {h.shape}, expected {shape}")
            pooled[l].append(pool(h))
            if cfg.tokens:
                toks[l].append(h)
        kept.append(label)
    if not kept:
        raise RuntimeError("no video could be exported")
    hidden = getattr(model.config, "hidden_size", shape[1])
    if shape[1] != hidden:
        raise RuntimeError(f"hidden dim {shape[1]} does not match the model config ({hidden})")
    extras = {
        "exporter": {"frames": cfg.frames, "size": cfg.size, "pooling_positions": "all", "layers": cfg.layers},
        "notes": notes,
    }
    write_dump(
        cfg.out,
        cfg.model,
        num_layers,
        kept,
        {l: np.stack(v) for l, v in pooled.items()},
        {l: np.stack(v) for l, v in toks.items()} if cfg.tokens else None,
        extras,
    )
    log.info("exported %d videos, %d layers, D=%d, N=%d to %s", len(kept), len(layers), shape[1], shape[0], cfg.out)
    return cfg.out


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="physteer_export")
    sub = parser.add_subparsers(dest="command", required=True)
    e = sub.add_parser("export", help="run the model and write a dump")
    e.add_argument("--model", required=True, help="model id or local directory")
    e.add_argument("--videos", required=True, type=Path)
    e.add_argument("--labels", required=True, type=Path)
    e.add_argument("--layers", default="all", help="'all' or comma-separated block indices")
    e.add_argument("--out", required=True, type=Path)
    e.add_argument("--tokens", action="store_true", help="also write token-level activations")
    e.add_argument("--frames", type=int, default=16)
    e.add_argument("--size", type=int, default=224)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="physteer_export: %(message)s")
    cfg = ExportConfig(
        model=args.model,
        videos=args.videos,
        labels=args.labels,
        out=args.out,
        layers=args.layers,
        frames=args.frames,
        size=args.size,
        tokens=args.tokens,
    )
    try:
        export(cfg)
    except ValueError as err:
        log.error("%s", err)
        return 2
    except OSError as err:
        log.error("%s", err)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
