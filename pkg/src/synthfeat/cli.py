"""Command-line entry point: synthfeat <subcommand>.

Subcommands: gen-data, inspect-sample, train, export, eval-normals,
retrieve, probe, confusion. Artifact-producing runs write a manifest
(command line, config hash, seeds, timestamps, artifact paths) next to
their outputs. Feature extractions can be cached under $SYNTHFEAT_CACHE.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import dataio, evalkit, scenegen, trainer
from .checkpoint import load_checkpoint
from .export import BackboneArtifact, absorb_batchnorm, convert_fc, rescale_weights
from .scenegen import GenConfig


def _source_revision():
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True,
                             text=True, timeout=5)
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def write_manifest(out_dir: Path, seeds: dict, artifacts: list[str],
                   config_blob: str = "", started: float | None = None):
    manifest = {
        "command_line": ["synthfeat"] + list(_invocation),
        "config_hash": hashlib.sha256(config_blob.encode()).hexdigest()[:16],
        "source_revision": _source_revision(),
        "seeds": seeds,
        "started": started,
        "finished": time.time(),
        "artifacts": artifacts,
    }
    path = Path(out_dir) / "manifest.json"
    tmp = path.with_suffix(".tmp")
    with open(tmp, "w") as f:
        json.dump(manifest, f, indent=2)
    tmp.replace(path)
    return path


def _parse_res(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"resolution must look like 64x64: {text}") from e


def _emit(report: dict, args):
    if getattr(args, "csv", False):
        flat = _flatten(report)
        w = csv.writer(sys.stdout)
        w.writerow(flat.keys())
        w.writerow(flat.values())
    else:
        print(json.dumps(report, indent=2))


def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, f"{key}."))
        else:
            out[key] = v
    return out


def _load_rgbs(path: Path, limit: int | None = None) -> torch.Tensor:
    path = Path(path)
    if path.is_file():
        from PIL import Image
        rgb = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
        return torch.from_numpy(rgb.transpose(2, 0, 1)[None])
    domain = "synthetic" if (path / "meta.json").exists() else "real"
    src = dataio.SampleSource(path, domain)
    n = len(src) if limit is None else min(limit, len(src))
    rgbs = [src.load_rgb(i).transpose(2, 0, 1) for i in range(n)]
    return torch.from_numpy(np.stack(rgbs).astype(np.float32))


def _cached_features(model, images, layer, cache_key, pooled=False):
    cache_root = os.environ.get("SYNTHFEAT_CACHE")
    if cache_root:
        path = Path(cache_root) / f"{cache_key}.npy"
        if path.exists():
            return torch.from_numpy(np.load(path))
    extract = (evalkit.extract_pooled_features if pooled
               else evalkit.extract_features)
    feats = extract(model, images, layer)
    if cache_root:
        Path(cache_root).mkdir(parents=True, exist_ok=True)
        np.save(Path(cache_root) / f"{cache_key}.npy", feats.numpy())
    return feats


def _file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args):
    started = time.time()
    profiles = {
        "synthetic": GenConfig(),
        "realproxy": GenConfig.realproxy(),
        "shapes": GenConfig(shape_class=-1),
    }
    config = profiles[args.profile]
    meta = scenegen.generate_dataset(args.out, args.seed, args.count,
                                     args.res, config)
    write_manifest(args.out, {"seed": args.seed}, [str(Path(args.out))],
                   json.dumps(meta, sort_keys=True), started)
    print(json.dumps(meta, indent=2))
    return 0


def cmd_inspect_sample(args):
    sample = scenegen.read_sample(args.dir, args.index)
    targets = dataio.derive_targets(sample)
    v = sample.valid
    report = {
        "index": args.index,
        "beta": targets.beta,
        "contour_pixels": int(targets.contour.sum()),
        "valid_fraction": float(v.mean()),
        "depth_min": float(sample.depth[v].min()) if v.any() else None,
        "depth_max": float(sample.depth[v].max()) if v.any() else None,
        "instances": int(sample.instance.max()),
    }
    _emit(report, args)
    return 0


def cmd_train(args):
    started = time.time()
    config = trainer.TrainConfig.from_toml(args.config)
    result = trainer.train(config, resume_from=args.resume)
    if args.csv_summary:
        trainer.write_csv_summary(result.records,
                                  Path(config.out_dir) / "train_summary.csv")
    write_manifest(config.out_dir, {"seed": config.seed},
                   [str(result.checkpoint_path), str(result.log_path)],
                   json.dumps(config.to_dict(), sort_keys=True), started)
    print(json.dumps({"checkpoint": str(result.checkpoint_path),
                      "log": str(result.log_path),
                      "loss_weights": result.weights.as_dict()}, indent=2))
    return 0


def cmd_export(args):
    started = time.time()
    model, state, _ = load_checkpoint(args.checkpoint)
    absorbed = absorb_batchnorm(model)
    backbone = convert_fc(absorbed, provenance={
        "source_checkpoint": _file_digest(args.checkpoint),
        "conversion": ["absorb_batchnorm", "convert_fc"],
    })
    if args.calib:
        images = _load_rgbs(args.calib, limit=args.calib_limit)
        backbone, scales = rescale_weights(
            backbone, [images[i:i + 16] for i in range(0, len(images), 16)])
        backbone.provenance["conversion"].append("rescale_weights")
    backbone.save(args.out)
    write_manifest(Path(args.out).parent, {}, [str(args.out)],
                   _file_digest(args.out), started)
    print(json.dumps({"backbone": str(args.out),
                      "layers": backbone.layer_names()}, indent=2))
    return 0


def _load_model_or_backbone(path):
    try:
        return BackboneArtifact.load(path)
    except ValueError:
        model, _, _ = load_checkpoint(path)
        model.eval()
        return model


def cmd_eval_normals(args):
    model, _, _ = load_checkpoint(args.checkpoint)
    model.eval()
    src = dataio.SampleSource(args.data, "synthetic")
    preds, gts, valids = [], [], []
    dump_dir = Path(args.dump_png) if args.dump_png else None
    for i in range(len(src)):
        sample = scenegen.read_sample(args.data, i)
        x = torch.from_numpy(sample.rgb.transpose(2, 0, 1)[None].astype(np.float32))
        with torch.no_grad():
            out = model(x)
        pred = out["normal"][0].numpy().transpose(1, 2, 0)
        preds.append(pred)
        gts.append(sample.normal)
        valids.append(sample.valid)
        if dump_dir is not None:
            _dump_prediction_pngs(dump_dir, i, out, sample)
    stats = evalkit.angular_error_stats(np.stack(preds), np.stack(gts),
                                        np.stack(valids))
    if dump_dir is not None:
        _dump_conv1_filters(dump_dir, model)
    _emit(stats.as_dict(), args)
    return 0


def _dump_prediction_pngs(dump_dir, index, out, sample):
    from PIL import Image
    dump_dir.mkdir(parents=True, exist_ok=True)
    normal = (out["normal"][0].numpy().transpose(1, 2, 0) * 0.5 + 0.5)
    depth = out["depth"][0, 0].numpy()
    depth = (depth - depth.min()) / max(depth.max() - depth.min(), 1e-6)
    contour = torch.sigmoid(out["contour"][0, 0]).numpy()
    for name, arr in (("normal", normal), ("depth", depth), ("contour", contour)):
        img = np.clip(arr * 255, 0, 255).astype(np.uint8)
        Image.fromarray(img).save(dump_dir / f"{index:06d}_{name}.png")


def _dump_conv1_filters(dump_dir, model):
    from PIL import Image
    w = model.trunk_blocks["conv1"].op.weight.detach().numpy()
    n, _, kh, kw = w.shape
    cols = int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    grid = np.zeros((rows * (kh + 1), cols * (kw + 1), 3), dtype=np.float32)
    for i in range(n):
        f = w[i, :3].transpose(1, 2, 0)
        f = (f - f.min()) / max(f.max() - f.min(), 1e-12)
        r, c = divmod(i, cols)
        grid[r * (kh + 1):r * (kh + 1) + kh, c * (kw + 1):c * (kw + 1) + kw] = f
    Image.fromarray((grid * 255).astype(np.uint8)).save(dump_dir / "conv1_filters.png")


def cmd_retrieve(args):
    model = _load_model_or_backbone(args.checkpoint)
    corpus = _load_rgbs(args.corpus, limit=args.limit)
    query = _load_rgbs(args.query, limit=args.limit)
    layer = args.layer
    if hasattr(model, "config"):   # trained model: map tap aliases to trunk names
        from .arch import TAP_TO_LAYER
        layer = TAP_TO_LAYER.get(layer, layer)
    results = evalkit.nearest_neighbors(model, query, corpus, layer, args.k)
    _emit({"results": [r.__dict__ for r in results]}, args)
    return 0


def cmd_probe(args):
    model = _load_model_or_backbone(args.backbone)
    labels = np.asarray(dataio.load_shape_labels(args.data))
    images = _load_rgbs(args.data)
    n = len(images)
    order = np.random.default_rng(evalkit.PROBE_SEED).permutation(n)
    split = int(0.8 * n)
    tr, te = order[:split], order[split:]
    acc = evalkit.linear_probe(model, args.layer, images[tr], labels[tr],
                               images[te], labels[te])
    _emit({"layer": args.layer, "accuracy": acc,
           "n_train": len(tr), "n_test": len(te)}, args)
    return 0


def cmd_confusion(args):
    model, _, _ = load_checkpoint(args.checkpoint)
    model.eval()
    layer = model.config.resolve_tap()
    syn = _load_rgbs(args.syn, limit=args.limit)
    real = _load_rgbs(args.real, limit=args.limit)
    key_base = _file_digest(args.checkpoint)
    fs = _cached_features(model, syn, layer,
                          f"{key_base}_{layer}_pool_syn_{len(syn)}", pooled=True)
    fr = _cached_features(model, real, layer,
                          f"{key_base}_{layer}_pool_real_{len(real)}", pooled=True)
    acc = evalkit.domain_confusion(fs.numpy(), fr.numpy())
    _emit({"layer": layer, "confusion_accuracy": acc}, args)
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="synthfeat",
                                description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a procedural dataset")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--res", type=_parse_res, required=True, metavar="HxW")
    g.add_argument("--out", required=True)
    g.add_argument("--profile", choices=("synthetic", "realproxy", "shapes"),
                   default="synthetic")
    g.set_defaults(func=cmd_gen_data)

    i = sub.add_parser("inspect-sample", help="print target statistics")
    i.add_argument("--dir", required=True)
    i.add_argument("--index", type=int, required=True)
    i.add_argument("--csv", action="store_true")
    i.set_defaults(func=cmd_inspect_sample)

    t = sub.add_parser("train", help="run the training loop")
    t.add_argument("--config", required=True)
    t.add_argument("--resume", default=None)
    t.add_argument("--csv-summary", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("export", help="export a standalone backbone")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--calib", default=None,
                   help="calibration image dir for weight rescaling")
    e.add_argument("--calib-limit", type=int, default=64)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_export)

    n = sub.add_parser("eval-normals", help="angular error on a dataset")
    n.add_argument("--checkpoint", required=True)
    n.add_argument("--data", required=True)
    n.add_argument("--dump-png", default=None,
                   help="directory for prediction maps and conv1 filter grid")
    n.add_argument("--csv", action="store_true")
    n.set_defaults(func=cmd_eval_normals)

    r = sub.add_parser("retrieve", help="nearest-neighbor retrieval")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--layer", default="conv5")
    r.add_argument("--query", required=True)
    r.add_argument("--corpus", required=True)
    r.add_argument("-k", type=int, default=4)
    r.add_argument("--limit", type=int, default=None)
    r.add_argument("--csv", action="store_true")
    r.set_defaults(func=cmd_retrieve)

    b = sub.add_parser("probe", help="frozen-feature linear probe")
    b.add_argument("--backbone", required=True)
    b.add_argument("--layer", default="conv5")
    b.add_argument("--data", required=True)
    b.add_argument("--csv", action="store_true")
    b.set_defaults(func=cmd_probe)

    c = sub.add_parser("confusion", help="domain-confusion diagnostic")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--syn", required=True)
    c.add_argument("--real", required=True)
    c.add_argument("--limit", type=int, default=None)
    c.add_argument("--csv", action="store_true")
    c.set_defaults(func=cmd_confusion)
    return p


_invocation: list[str] = []


def dispatch(argv=None) -> int:
    global _invocation
    _invocation = list(argv) if argv is not None else sys.argv[1:]
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as e:
        print(f"error: not-found: {e}", file=sys.stderr)
        return 1
    except (ValueError, RuntimeError, KeyError) as e:
        print(f"error: runtime: {e}", file=sys.stderr)
        return 1


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
