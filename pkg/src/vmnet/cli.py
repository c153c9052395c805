"""Command-line entry point: hierarchy, voxel-stats, train, infer, eval, ablate, gradcheck.

Exit codes: 0 success, 1 validation error, 2 numerical abort, 3 incompatible checkpoint.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, field, replace

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_COMPAT = 0, 1, 2, 3
TOOL_VERSION = "0.1.0"

# fixed purpose ids for splitting the single --seed
SEED_DATA, SEED_INIT, SEED_TRAIN, SEED_TEST_DATA = 1, 2, 3, 4


class UsageError(ValueError):
    pass


def split_seed(seed: int, purpose: int) -> int:
    import numpy as np
    return int(np.random.SeedSequence([seed, purpose]).generate_state(1)[0])


def git_blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def mesh_hash(mesh) -> str:
    parts = [mesh.positions.tobytes(), mesh.faces.tobytes(), mesh.colors.tobytes()]
    if mesh.labels is not None:
        parts.append(mesh.labels.tobytes())
    return git_blob_hash(b"".join(parts))


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict
    input_hashes: dict = field(default_factory=dict)
    tool_version: str = TOOL_VERSION

    def write(self, out_dir: str) -> str:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, "manifest.json")
        tmp = path + ".tmp"
        with open(tmp, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
        return path


def _write_json(path, obj):
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# configuration

def load_config(args) -> dict:
    """Merge the JSON ``--config`` file with command-line overrides into model/hyper/scene dicts."""
    cfg = {"model": {}, "hyper": {}, "scene": {}}
    if args.config:
        with open(args.config) as fh:
            user = json.load(fh)
        unknown = set(user) - set(cfg)
        if unknown:
            raise UsageError(f"unknown config section(s): {sorted(unknown)}")
        for k, v in user.items():
            cfg[k].update(v)
    m = cfg["model"]
    for flag, key in (("variant", "variant"), ("branch", "branch"), ("fusion", "fusion"),
                      ("hierarchy_method", "hierarchy"), ("refinement_depth", "refinement_depth"),
                      ("voxel_size", "voxel_size"), ("num_classes", "num_classes")):
        val = getattr(args, flag, None)
        if val is not None:
            m[key] = val
    if getattr(args, "levels", None) is not None:
        m["levels"] = args.levels
    if getattr(args, "widths", None):
        m["widths"] = [int(w) for w in args.widths.split(",")]
    m.setdefault("voxel_size", 0.05)
    if args.precision:
        m["dtype"] = "float64" if args.precision == "double" else "float32"
    if getattr(args, "epochs", None) is not None:
        cfg["hyper"]["epochs"] = args.epochs
    s = cfg["scene"]
    s.setdefault("voxel_size", m["voxel_size"])
    if "num_classes" in m:
        s.setdefault("num_classes", m["num_classes"])
    return cfg


def build_configs(cfg):
    from .network import ModelConfig
    from .training import Hyperparams, SceneSpec
    model = ModelConfig.from_dict(cfg["model"])
    scene = SceneSpec(**cfg["scene"])
    if scene.num_classes > model.num_classes:
        raise UsageError("scene spec has more classes than the model")
    return model, Hyperparams.from_dict(cfg["hyper"]), scene


def load_scenes(args, scene_spec, purpose, count):
    """Meshes from ``--data-dir`` (PLY/OBJ with labels) or generated from the scene spec."""
    import numpy as np
    from .mesh import load_mesh
    from .training import generate_scene
    if getattr(args, "data_dir", None):
        names = sorted(f for f in os.listdir(args.data_dir)
                       if f.lower().endswith((".ply", ".obj")))
        if not names:
            raise UsageError(f"no .ply/.obj files in {args.data_dir}")
        meshes, hashes = [], {}
        for f in names:
            path = os.path.join(args.data_dir, f)
            with open(path, "rb") as fh:
                hashes[f] = git_blob_hash(fh.read())
            meshes.append(load_mesh(path))
        if any(m.labels is None for m in meshes):
            raise UsageError("training/eval meshes need a per-vertex label property")
        return meshes, hashes
    base = split_seed(args.seed, purpose)
    cache = getattr(args, "cache_dir", None)
    key = git_blob_hash(json.dumps([asdict(scene_spec), base, count], sort_keys=True).encode())
    if cache:
        path = os.path.join(cache, f"scenes_{key}.npz")
        if os.path.exists(path):
            return _read_cached(path), {"generated": key}
    meshes = [generate_scene(scene_spec, [base, i]) for i in range(count)]
    if cache:
        os.makedirs(cache, exist_ok=True)
        arrays = {}
        for i, m in enumerate(meshes):
            arrays.update({f"p{i}": m.positions, f"f{i}": m.faces, f"c{i}": m.colors,
                           f"l{i}": m.labels})
        tmp = os.path.join(cache, f".tmp_{key}.npz")
        np.savez(tmp, **arrays)
        os.replace(tmp, path)
    return meshes, {"generated": key}


def _read_cached(path):
    import numpy as np
    from .mesh import SurfaceMesh
    z = np.load(path)
    n = len([k for k in z.files if k.startswith("p")])
    return [SurfaceMesh(z[f"p{i}"], z[f"f{i}"], z[f"c{i}"], z[f"l{i}"]) for i in range(n)]


# ---------------------------------------------------------------------------
# commands

def cmd_hierarchy(args) -> int:
    from .hierarchy import HierarchySpec, build_hierarchy
    from .mesh import load_mesh
    from .training import SceneSpec, generate_scene
    cfg = load_config(args)
    voxel = cfg["model"]["voxel_size"]
    if args.input:
        mesh = load_mesh(args.input)
        with open(args.input, "rb") as fh:
            hashes = {os.path.basename(args.input): git_blob_hash(fh.read())}
    else:
        mesh = generate_scene(SceneSpec(**cfg["scene"]), split_seed(args.seed, SEED_DATA))
        hashes = {"generated": mesh_hash(mesh)}
    spec = HierarchySpec.for_voxel_size(voxel, args.levels or 3, args.spec)
    out = args.out or "hierarchy_out"
    RunManifest("hierarchy", dict(spec=asdict(spec), voxel_size=voxel),
                {"seed": args.seed}, hashes).write(out)
    h = build_hierarchy(mesh, spec)
    h.save(out)
    stats = h.stats()
    _write_json(os.path.join(out, "stats.json"), stats)
    print(f"{'level':>5} {'vertices':>9} {'faces':>8}  method")
    for s in stats:
        print(f"{s['level']:>5} {s['vertices']:>9} {s['faces']:>8}  {s['method']}")
    return EXIT_OK


def cmd_voxel_stats(args) -> int:
    import numpy as np
    from .mesh import load_mesh
    from .training import SceneSpec, generate_scene
    from .voxel import strided_rulebook, voxelize, SparseVoxelGrid
    cfg = load_config(args)
    r = 1.0 / cfg["model"]["voxel_size"]
    if args.input:
        mesh = load_mesh(args.input)
    else:
        mesh = generate_scene(SceneSpec(**cfg["scene"]), split_seed(args.seed, SEED_DATA))
    grid, v2v = voxelize(mesh.positions, mesh.colors, r)
    rows = []
    g = grid
    for lvl in range(args.levels or 3):
        rows.append(dict(level=lvl, resolution=g.resolution, voxels=len(g)))
        if lvl + 1 < (args.levels or 3):
            g = SparseVoxelGrid(strided_rulebook(g).out_coords, g.resolution / 2)
    occ = np.bincount(v2v)
    report = dict(vertices=mesh.num_vertices, levels=rows,
                  vertices_per_voxel=dict(mean=float(occ.mean()), max=int(occ.max())))
    print(json.dumps(report, indent=2))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_json(os.path.join(args.out, "voxel_stats.json"), report)
    return EXIT_OK


def cmd_train(args) -> int:
    from .network import build_model, make_scene
    from .training import train
    cfg = load_config(args)
    model_cfg, hp, scene_spec = build_configs(cfg)
    hp = replace(hp, seed=split_seed(args.seed, SEED_TRAIN))
    init_seed = split_seed(args.seed, SEED_INIT)
    out = args.out or "train_out"
    meshes, hashes = load_scenes(args, scene_spec, SEED_DATA, args.num_scenes)
    RunManifest("train", dict(model=asdict(model_cfg), hyper=asdict(hp),
                              scene=asdict(scene_spec)),
                dict(seed=args.seed, init=init_seed, train=hp.seed), hashes).write(out)
    scenes = [make_scene(m, model_cfg) for m in meshes]
    model = build_model(model_cfg, init_seed)
    res = train(model, scenes, hp, out_dir=out)
    last = res.log[-1]
    print(f"trained {len(res.log)} epochs: loss {last['loss']:.4f} "
          f"train_acc {last['train_acc']:.4f} (best epoch {res.best_epoch})")
    return EXIT_OK


def _load_checked(args):
    from . import nn
    from .network import ModelConfig, build_model, check_compatible, load_model
    if args.config:
        cfg = load_config(args)
        model = build_model(ModelConfig.from_dict(cfg["model"]), 0)
        tensors, _ = nn.read_checkpoint(args.checkpoint)
        check_compatible(model, tensors)
        for k in model.store:
            model.store.params[k] = tensors[k].astype(model.store.params[k].dtype)
        return model
    return load_model(args.checkpoint)


def cmd_infer(args) -> int:
    from .mesh import label_colors, load_mesh, save_ply
    from .network import make_scene, predict
    model = _load_checked(args)
    mesh = load_mesh(args.mesh)
    pred = predict(model, make_scene(mesh, model.config))
    label_colors(pred)
    out = args.out_path or (os.path.join(args.out, "prediction.ply") if args.out else
                            "prediction.ply")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    save_ply(out, mesh, labels=pred, colors_from_labels=True)
    if mesh.labels is not None:
        print(f"vertex accuracy {float((pred == mesh.labels).mean()):.4f}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .network import make_scene
    from .training import SceneSpec, evaluate
    model = _load_checked(args)
    cfg = load_config(args)
    cfg["scene"].setdefault("num_classes", model.config.num_classes)
    cfg["scene"]["voxel_size"] = model.config.voxel_size
    meshes, hashes = load_scenes(args, SceneSpec(**cfg["scene"]), SEED_TEST_DATA,
                                 args.num_scenes)
    report = evaluate(model, [make_scene(m, model.config) for m in meshes])
    text = json.dumps({k: report[k] for k in ("per_class_iou", "miou", "per_class_acc",
                                               "macc")}, indent=2)
    print(text)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_json(os.path.join(args.out, "metrics.json"), report)
    return EXIT_OK


def _csv(s):
    return [x for x in s.split(",") if x] if s else None


def ablation_matrix(base, variants=None, branches=None, hierarchies=None, fusions=None,
                    depths=None) -> dict:
    """Named configs for the cartesian product of the requested axes."""
    import itertools
    axes = [("variant", variants), ("branch", branches), ("hierarchy", hierarchies),
            ("fusion", fusions), ("refinement_depth", depths)]
    axes = [(k, v) for k, v in axes if v]
    out = {}
    for combo in itertools.product(*[v for _, v in axes]):
        kw = dict(zip([k for k, _ in axes], combo))
        name = "/".join(f"{v}" for v in combo) or "base"
        out[name] = replace(base, **kw)
    return out


def cmd_ablate(args) -> int:
    from .benchmark import BenchmarkSpec, Dataset, format_table, run_one, summarize
    cfg = load_config(args)
    model_cfg, hp, scene_spec = build_configs(cfg)
    depths = [None if d == "all" else int(d) for d in _csv(args.depths)] if args.depths else None
    matrix = ablation_matrix(model_cfg, _csv(args.variants), _csv(args.branches),
                             _csv(args.hierarchies), _csv(args.fusions), depths)
    seeds = tuple(split_seed(args.seed, 100 + i) for i in range(args.seeds))
    out = args.out or "ablate_out"
    RunManifest("ablate", dict(model=asdict(model_cfg), hyper=asdict(hp),
                               scene=asdict(scene_spec), matrix=sorted(matrix)),
                dict(seed=args.seed, runs=list(seeds)), {}).write(out)
    datasets = {}
    results = {}
    log_path = os.path.join(out, "runs.jsonl")
    with open(log_path, "w") as log:
        for name, mc in matrix.items():
            if mc.hierarchy not in datasets:
                spec = BenchmarkSpec(scene=scene_spec, model=mc, hyper=hp, n_train=args.n_train,
                                     n_test=args.n_test, seeds=seeds,
                                     data_seed=split_seed(args.seed, SEED_DATA))
                datasets[mc.hierarchy] = Dataset(spec)
            data = datasets[mc.hierarchy]
            results[name] = [run_one(data, name, mc, s, lambda line: log.write(line + "\n"))
                             for s in seeds]
    rows = summarize(results)
    _write_json(os.path.join(out, "summary.json"), rows)
    print(format_table(rows))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import OPS, format_report, run_gradchecks
    names = None if args.op == "all" else [args.op]
    if names and names[0] not in OPS:
        raise UsageError(f"unknown op {args.op!r}; choose from: all, {', '.join(OPS)}")
    seeds = tuple(range(args.seed, args.seed + args.repeats))
    rows = run_gradchecks(names, seeds, corrupt=args.corrupt)
    print(format_report(rows))
    failed = [r for r in rows if not r[2].passed]
    print(f"{len(rows) - len(failed)}/{len(rows)} checks passed")
    return EXIT_OK if not failed else EXIT_VALIDATION


# ---------------------------------------------------------------------------
# argument parsing

def _common(p):
    p.add_argument("--seed", type=int, default=0, help="single seed; all randomness derives from it")
    p.add_argument("--config", help="JSON file with model/hyper/scene sections")
    p.add_argument("--out", help="output directory")
    p.add_argument("--threads", type=int, default=None, help="BLAS/OpenMP thread count")
    p.add_argument("--precision", choices=("single", "double"), default=None)


def _model_flags(p):
    p.add_argument("--variant", choices=("scalar", "vector", "edgeconv"))
    p.add_argument("--branch", choices=("full", "euc_only", "geo_only", "euc_intra"))
    p.add_argument("--fusion", choices=("primal", "dual"))
    p.add_argument("--hierarchy-method", choices=("vc_qem", "vc_only", "qem_only"))
    p.add_argument("--refinement-depth", type=int)
    p.add_argument("--voxel-size", type=float)
    p.add_argument("--levels", type=int)
    p.add_argument("--widths", help="comma-separated channel widths, e.g. 16,32,64")
    p.add_argument("--num-classes", type=int)


def _data_flags(p, default_scenes):
    p.add_argument("--data-dir", help="directory of labeled .ply/.obj meshes")
    p.add_argument("--num-scenes", type=int, default=default_scenes)
    p.add_argument("--cache-dir", help="cache generated scenes here, keyed by content hash")


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors, which is reserved for numerical aborts here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vmnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("hierarchy", help="build and save a mesh hierarchy")
    _common(p)
    p.add_argument("--input", help="input mesh (.ply/.obj); default: a generated scene")
    p.add_argument("--spec", choices=("vc_qem", "vc_only", "qem_only"), default="vc_qem")
    p.add_argument("--levels", type=int)
    p.add_argument("--voxel-size", type=float)
    p.set_defaults(func=cmd_hierarchy)

    p = sub.add_parser("voxel-stats", help="voxel counts per level")
    _common(p)
    p.add_argument("--input")
    p.add_argument("--levels", type=int)
    p.add_argument("--voxel-size", type=float)
    p.set_defaults(func=cmd_voxel_stats)

    p = sub.add_parser("train", help="train a model")
    _common(p)
    _model_flags(p)
    _data_flags(p, 4)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict labels for a mesh")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mesh", required=True)
    p.add_argument("--out-path", help="output PLY path")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score a checkpoint")
    _common(p)
    _data_flags(p, 4)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train a matrix of variants over several seeds")
    _common(p)
    _model_flags(p)
    p.add_argument("--variants")
    p.add_argument("--branches")
    p.add_argument("--hierarchies")
    p.add_argument("--fusions")
    p.add_argument("--depths", help="comma-separated refinement depths or 'all'")
    p.add_argument("--seeds", type=int, default=3, help="number of training seeds")
    p.add_argument("--n-train", type=int, default=40)
    p.add_argument("--n-test", type=int, default=20)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    _common(p)
    p.add_argument("op", nargs="?", default="all")
    p.add_argument("--repeats", type=int, default=5, help="seeds per op")
    p.add_argument("--corrupt", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    from .hierarchy import HierarchyError
    from .mesh import MeshFormatError, MeshValidationError
    from .network import CompatibilityError, ConfigError
    from .nn import CheckpointError
    from .training import SceneGenerationError, TrainingAbort
    try:
        return args.func(args)
    except CompatibilityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COMPAT
    except (TrainingAbort, FloatingPointError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, HierarchyError, MeshFormatError, MeshValidationError,
            CheckpointError, SceneGenerationError, ValueError, KeyError, TypeError,
            OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
