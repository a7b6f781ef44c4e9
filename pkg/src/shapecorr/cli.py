"""Command-line surface: preprocess, ncp-un, denoise, demo, eval, fskd.

Every subcommand reads one YAML config (plus ``--set key.path=value``
overrides), writes its artifacts under the configured output directory
together with a manifest recording the config hash and seed, and is
deterministic under a fixed config+seed.  Exit codes: 0 success, 1 config
validation, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import fskd as fskd_mod
from .config import (ConfigError, augment_from, config_hash, load_config,
                     train_config_from)
from .eval import (corrupt_map, geodesic_distances, geodesic_error,
                   map_smoothness, pck_curve)
from .featnet import forward, load_checkpoint, save_checkpoint
from .fmap import nn_map
from .geometry import Shape, load_shape, normalize, synth_collection
from .maps import PointMap, identity_map, load_point_map, save_point_map
from .pipeline import (Collection, TrainConfig, ncp_demo, ncp_un,
                       test_time_denoise)
from .spectral import (EigensolverError, cotan_laplacian, eigenbasis,
                       load_basis, pointcloud_laplacian, save_basis,
                       shape_hash)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


def _fmt(x) -> str:
    if isinstance(x, float):
        return format(x, ".10g")
    return str(x)


def _write_csv(path, header, rows) -> None:
    with open(path, "w") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(_fmt(v) for v in row) + "\n")


def _write_manifest(outdir: Path, cfg: dict, command: str, outputs) -> None:
    manifest = {
        "command": command,
        "seed": cfg["seed"],
        "config_hash": config_hash(cfg),
        "outputs": sorted(str(o) for o in outputs),
        "config": cfg,
    }
    with open(outdir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True, default=str)


def _load_shapes(cfg: dict) -> list[Shape]:
    """Shapes from file globs (sorted), or the bundled synthetic collection."""
    syn = cfg["inputs"]["synthetic"]
    globs = cfg["inputs"]["shapes"]
    if syn["enabled"] and globs:
        raise ConfigError("configure either inputs.shapes or inputs.synthetic")
    if syn["enabled"]:
        seed = cfg["seed"] if syn["seed"] is None else int(syn["seed"])
        return synth_collection(syn["kind"], int(syn["n_shapes"]),
                                int(syn["n_target"]), float(syn["magnitude"]),
                                seed)
    paths = sorted(p for g in globs for p in glob.glob(g))
    if not paths:
        raise ConfigError("no input shapes: inputs.shapes matched nothing and "
                          "inputs.synthetic.enabled is false")
    return [normalize(load_shape(p)) for p in paths]


def _cache_dir(cfg: dict) -> Path:
    d = Path(os.environ.get("SHAPECORR_CACHE_DIR", cfg["cache_dir"]))
    d.mkdir(parents=True, exist_ok=True)
    return d


def _basis_for(shape: Shape, cfg: dict, cache: Path, rebuild: bool = False):
    """Cached eigenbasis for a shape; (basis, cache_path, was_built)."""
    k = int(cfg["train"]["k"])
    path = cache / f"{shape.id}.k{k}.npz"
    digest = shape_hash(shape)
    if path.exists() and not rebuild:
        basis, stored = load_basis(path)
        if stored == digest and basis.k == k:
            return basis, path, False
    if shape.is_mesh:
        lap = cotan_laplacian(shape)
    else:
        lb = cfg["laplacian"]
        lap = pointcloud_laplacian(shape, k_nn=int(lb["k_nn"]),
                                   bandwidth=lb["bandwidth"])
    basis = eigenbasis(lap, k)
    save_basis(basis, path, digest)
    return basis, path, True


def _collection(cfg: dict, shapes) -> Collection:
    cache = _cache_dir(cfg)
    bases = [_basis_for(s, cfg, cache)[0] for s in shapes]
    train_idx = list(cfg["split"]["train"])
    test_idx = list(cfg["split"]["test"])
    if not train_idx and not test_idx:
        n = len(shapes)
        n_train = max(2, (2 * n) // 3)
        train_idx = list(range(n_train))
        test_idx = list(range(n_train, n))
    train_pairs = [(i, j) for a, i in enumerate(train_idx)
                   for j in train_idx[a + 1:]]
    test_pairs = [(i, j) for a, i in enumerate(test_idx)
                  for j in test_idx[a + 1:]]
    return Collection(shapes, bases, train_idx, test_idx, train_pairs,
                      test_pairs)


def _gt_available(cfg: dict) -> bool:
    return cfg["inputs"]["synthetic"]["enabled"]


def _identity_gt(shapes, pairs) -> dict:
    return {(i, j): identity_map(shapes[i].n_vertices, shapes[i].id,
                                 shapes[j].id) for i, j in pairs}


# ---------------------------------------------------------------------------
# subcommands


def cmd_preprocess(cfg: dict) -> int:
    outdir = Path(cfg["output_dir"])
    outdir.mkdir(parents=True, exist_ok=True)
    cache = _cache_dir(cfg)
    syn = cfg["inputs"]["synthetic"]
    failures = []
    outputs = []
    if syn["enabled"]:
        shapes = _load_shapes(cfg)
        sources = [(s.id, s) for s in shapes]
    else:
        paths = sorted(p for g in cfg["inputs"]["shapes"]
                       for p in glob.glob(g))
        if not paths:
            raise ConfigError("no input shapes matched")
        sources = [(p, None) for p in paths]
    for name, pre in sources:
        try:
            shape = pre if pre is not None else normalize(load_shape(name))
            basis, path, built = _basis_for(shape, cfg, cache)
            outputs.append(path)
            print(f"{name}: {'built' if built else 'cached'} "
                  f"(n={shape.n_vertices}, k={basis.k})")
        except (OSError, ValueError, EigensolverError) as exc:
            failures.append((name, str(exc)))
            print(f"{name}: FAILED ({exc})", file=sys.stderr)
    _write_manifest(outdir, cfg, "preprocess", outputs)
    if failures:
        print(f"{len(failures)} of {len(sources)} shapes failed",
              file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_ncp_un(cfg: dict) -> int:
    outdir = Path(cfg["output_dir"])
    outdir.mkdir(parents=True, exist_ok=True)
    shapes = _load_shapes(cfg)
    coll = _collection(cfg, shapes)
    tc = train_config_from(cfg)
    gt_maps = _identity_gt(shapes, coll.test_pairs) if _gt_available(cfg) else None
    net2, test_maps, metrics = ncp_un(coll, tc, gt_maps=gt_maps)
    outputs = []
    ckpt = outdir / "stage2.npz"
    save_checkpoint(net2, ckpt)
    outputs.append(ckpt)
    map_dir = outdir / "maps"
    map_dir.mkdir(exist_ok=True)
    for (i, j, prov), pmap in sorted(test_maps.maps.items()):
        p = map_dir / f"{prov}_{i}_{j}.txt"
        save_point_map(pmap, p)
        outputs.append(p)
    header = ["pair", "provenance", "geodesic_error", "smoothness"]
    rows = [[m["pair"], m["provenance"], m.get("geodesic_error", "nan"),
             m.get("smoothness", "nan")] for m in metrics]
    metrics_path = outdir / "metrics.csv"
    _write_csv(metrics_path, header, rows)
    outputs.append(metrics_path)
    _write_manifest(outdir, cfg, "ncp-un", outputs)
    print(f"wrote {metrics_path}")
    return EXIT_OK


def _denoise_pair(cfg: dict, shapes, coll: Collection):
    i, j = (int(x) for x in cfg["denoise"]["pair"])
    if cfg["denoise"]["map_file"]:
        noisy = load_point_map(cfg["denoise"]["map_file"])
    else:
        if not _gt_available(cfg):
            raise ConfigError("denoise needs denoise.map_file for file inputs")
        gt = identity_map(shapes[i].n_vertices, shapes[i].id, shapes[j].id)
        noisy = corrupt_map(gt, float(cfg["denoise"]["noise"]),
                            seed=int(cfg["seed"]) + 17)
    return i, j, noisy


def cmd_denoise(cfg: dict) -> int:
    outdir = Path(cfg["output_dir"])
    outdir.mkdir(parents=True, exist_ok=True)
    shapes = _load_shapes(cfg)
    coll = _collection(cfg, shapes)
    tc = train_config_from(cfg)
    i, j, noisy = _denoise_pair(cfg, shapes, coll)
    result = test_time_denoise(shapes[i], shapes[j], coll.bases[i],
                               coll.bases[j], noisy, tc)
    outputs = []
    map_path = outdir / f"denoised_{i}_{j}.txt"
    save_point_map(result.map, map_path)
    outputs.append(map_path)
    log_path = outdir / "cycle_log.csv"
    _write_csv(log_path, ["iteration", "cycle_loss"],
               [(it, v) for it, v in enumerate(result.cycle_log)])
    outputs.append(log_path)
    rows = [["best_iteration", result.best_iteration],
            ["best_cycle_loss", result.best_cycle_loss]]
    if _gt_available(cfg):
        gt = identity_map(shapes[i].n_vertices, shapes[i].id, shapes[j].id)
        field = geodesic_distances(shapes[j]) if shapes[j].is_mesh else None
        rows.append(["input_error", geodesic_error(noisy, gt, shapes[j], field)])
        rows.append(["output_error",
                     geodesic_error(result.map, gt, shapes[j], field)])
    summary_path = outdir / "denoise_summary.csv"
    _write_csv(summary_path, ["key", "value"], rows)
    outputs.append(summary_path)
    _write_manifest(outdir, cfg, "denoise", outputs)
    print(f"wrote {map_path}")
    return EXIT_OK


def cmd_demo(cfg: dict) -> int:
    outdir = Path(cfg["output_dir"])
    outdir.mkdir(parents=True, exist_ok=True)
    shapes = _load_shapes(cfg)
    coll = _collection(cfg, shapes)
    tc = train_config_from(cfg)
    i, j = (int(x) for x in cfg["demo"]["pair"])
    if not _gt_available(cfg):
        raise ConfigError("demo needs synthetic inputs (ground truth required)")
    gt = identity_map(shapes[i].n_vertices, shapes[i].id, shapes[j].id)
    levels = [float(x) for x in cfg["demo"]["noise_levels"]]
    curves = ncp_demo(shapes[i], shapes[j], coll.bases[i], coll.bases[j],
                      gt, levels, tc)
    outputs = []
    for level, data in sorted(curves.items()):
        path = outdir / f"curve_p{int(round(level * 100)):03d}.csv"
        _write_csv(path, ["iteration", "loss", "geodesic_error"], data["curve"])
        outputs.append(path)
    summary = [[lvl, data["input_error"],
                min(c[2] for c in data["curve"]),
                data["curve"][-1][2]]
               for lvl, data in sorted(curves.items())]
    spath = outdir / "demo_summary.csv"
    _write_csv(spath, ["noise", "input_error", "min_error", "final_error"],
               summary)
    outputs.append(spath)
    _write_manifest(outdir, cfg, "demo", outputs)
    print(f"wrote {len(outputs)} files to {outdir}")
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    outdir = Path(cfg["output_dir"])
    outdir.mkdir(parents=True, exist_ok=True)
    shapes = _load_shapes(cfg)
    by_id = {s.id: i for i, s in enumerate(shapes)}
    map_paths = sorted(p for g in cfg["eval"]["maps"] for p in glob.glob(g))
    if not map_paths:
        raise ConfigError("eval.maps matched no files")
    gt_mode = cfg["eval"]["gt_mode"]
    if gt_mode not in ("identity", "files"):
        raise ConfigError("eval.gt_mode must be 'identity' or 'files'")
    rows = []
    errors = []
    fields = {}
    for path in map_paths:
        pred = load_point_map(path)
        if pred.from_id not in by_id or pred.to_id not in by_id:
            raise ConfigError(f"{path}: shape ids {pred.direction} not among inputs")
        i, j = by_id[pred.from_id], by_id[pred.to_id]
        if gt_mode == "identity":
            gt = identity_map(shapes[i].n_vertices, pred.from_id, pred.to_id)
        else:
            gt_path = Path(cfg["eval"]["gt_dir"]) / Path(path).name
            gt = load_point_map(gt_path)
        if shapes[j].is_mesh and j not in fields:
            fields[j] = geodesic_distances(shapes[j])
        err = geodesic_error(pred, gt, shapes[j], fields.get(j))
        smooth = map_smoothness(pred, shapes[i], shapes[j]) \
            if shapes[i].is_mesh else float("nan")
        rows.append([Path(path).name, f"{pred.from_id}->{pred.to_id}", err, smooth])
        errors.append(err)
    report = outdir / "eval_report.csv"
    _write_csv(report, ["map", "direction", "geodesic_error", "smoothness"], rows)
    thresholds = [float(t) for t in cfg["eval"]["pck_thresholds"]]
    curve = pck_curve(errors, thresholds)
    pck_path = outdir / "pck.csv"
    _write_csv(pck_path, ["threshold", "fraction"], list(zip(thresholds, curve)))
    _write_manifest(outdir, cfg, "eval", [report, pck_path])
    print(f"wrote {report}")
    return EXIT_OK


def _fps_vertices(shape: Shape, m: int, seed: int) -> np.ndarray:
    """Farthest-point sampling in Euclidean distance, deterministic per seed."""
    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(shape.n_vertices))]
    d = np.linalg.norm(shape.vertices - shape.vertices[chosen[0]], axis=1)
    for _ in range(m - 1):
        nxt = int(np.argmax(d))
        chosen.append(nxt)
        d = np.minimum(d, np.linalg.norm(shape.vertices - shape.vertices[nxt],
                                         axis=1))
    return np.array(chosen, dtype=np.int64)


def cmd_fskd(cfg: dict) -> int:
    outdir = Path(cfg["output_dir"])
    outdir.mkdir(parents=True, exist_ok=True)
    shapes = _load_shapes(cfg)
    coll = _collection(cfg, shapes)
    fc = cfg["fskd"]
    params = fskd_mod.FskdParams(nu=float(fc["nu"]), sigma=float(fc["sigma"]),
                                 n_sources=int(fc["n_sources"]))
    ckpt = fc["checkpoint"] or (Path(cfg["output_dir"]) / "stage2.npz")
    if not Path(ckpt).exists():
        raise ConfigError(f"fskd needs a trained checkpoint (missing {ckpt}); "
                          "run ncp-un first or set fskd.checkpoint")
    net = load_checkpoint(ckpt)
    if fc["keypoint_files"]:
        keysets = [fskd_mod.load_keypoints(p) for p in fc["keypoint_files"]]
        labeled_idx = [i for i, s in enumerate(shapes)
                       if s.id in {k.shape_id for k in keysets}]
        by_sid = {k.shape_id: k for k in keysets}
        labeled = [(shapes[i], coll.bases[i], by_sid[shapes[i].id])
                   for i in labeled_idx]
        gt_for = None
    else:
        if not _gt_available(cfg):
            raise ConfigError("fskd needs fskd.keypoint_files for file inputs")
        # identical vertex ids are keypoint GT across a synthetic collection
        kp_verts = _fps_vertices(shapes[0], int(fc["synthetic_keypoints"]),
                                 int(cfg["seed"]) + 29)
        kp_ids = np.arange(len(kp_verts))

        def gt_for(idx):
            return fskd_mod.KeypointSet(shapes[idx].id, kp_ids, kp_verts)

        labeled = [(shapes[i], coll.bases[i], gt_for(i))
                   for i in coll.train_idx]
    order = fskd_mod.select_sources([entry[2] for entry in labeled],
                                    params.n_sources, seed=int(cfg["seed"]))
    sources = [labeled[i] for i in order]
    outputs = []
    rows = []
    for t in coll.test_idx:
        pred = fskd_mod.fskd_predict(sources, (shapes[t], coll.bases[t]),
                                     net, params)
        path = outdir / f"keypoints_{shapes[t].id}.txt"
        fskd_mod.save_keypoints(pred, path)
        outputs.append(path)
        if gt_for is not None:
            miou = fskd_mod.keypoint_miou(pred, gt_for(t), shapes[t],
                                          threshold=float(fc["threshold"]))
            rows.append([shapes[t].id, len(pred), miou])
    if rows:
        table = outdir / "fskd_miou.csv"
        _write_csv(table, ["shape", "n_predicted", "miou"], rows)
        outputs.append(table)
    _write_manifest(outdir, cfg, "fskd", outputs)
    print(f"wrote {len(outputs)} files to {outdir}")
    return EXIT_OK


COMMANDS = {
    "preprocess": cmd_preprocess,
    "ncp-un": cmd_ncp_un,
    "denoise": cmd_denoise,
    "demo": cmd_demo,
    "eval": cmd_eval,
    "fskd": cmd_fskd,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="shapecorr",
        description="Spectral shape correspondence: preprocessing, two-stage "
                    "unsupervised matching, map denoising, evaluation, and "
                    "keypoint transfer.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="YAML run configuration")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY.PATH=VALUE",
                        help="override a config entry (repeatable)")
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        cfg = load_config(args.config, args.overrides)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        t0 = time.perf_counter()
        rc = COMMANDS[args.command](cfg)
        print(f"[{args.command}] done in {time.perf_counter() - t0:.1f}s "
              f"(exit {rc})")
        return rc
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # runtime failure: report and exit 2
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
