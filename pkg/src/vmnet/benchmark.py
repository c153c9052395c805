"""Desk-scale trend benchmark on geodesic-trap scenes (branch and component ablations)."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .network import ModelConfig, build_model, make_scene
from .training import (Hyperparams, SceneSpec, evaluate, generate_scene_detailed, train,
                       trap_pair_outcomes)


@dataclass(frozen=True)
class BenchmarkSpec:
    scene: SceneSpec = field(default_factory=SceneSpec)
    model: ModelConfig = field(default_factory=lambda: ModelConfig(voxel_size=0.05))
    hyper: Hyperparams = field(default_factory=lambda: Hyperparams(epochs=40))
    n_train: int = 40
    n_test: int = 20
    seeds: tuple = (0, 1, 2)
    data_seed: int = 1234

    @property
    def contact_radius(self) -> float:
        return 1.5 * self.scene.voxel_size


@dataclass
class RunResult:
    name: str
    seed: int
    miou: float
    macc: float
    per_class_iou: list
    trap_total: int
    trap_separated: int
    seconds: float

    @property
    def trap_failures(self) -> int:
        return self.trap_total - self.trap_separated


class Dataset:
    """Train/test scenes with hierarchies built once and shared by every model."""

    def __init__(self, spec: BenchmarkSpec):
        self.spec = spec
        n = spec.n_train + spec.n_test
        self.synthetic = [generate_scene_detailed(spec.scene, [spec.data_seed, i]) for i in range(n)]
        self.scenes = [make_scene(s.mesh, spec.model) for s in self.synthetic]

    @property
    def train(self):
        return self.scenes[:self.spec.n_train]

    @property
    def test(self):
        return self.scenes[self.spec.n_train:]

    @property
    def test_synthetic(self):
        return self.synthetic[self.spec.n_train:]


def run_one(data: Dataset, name: str, config: ModelConfig, seed: int, log=None) -> RunResult:
    spec = data.spec
    t0 = time.perf_counter()
    model = build_model(config, seed)
    train(model, data.train, replace(spec.hyper, seed=seed))
    report = evaluate(model, data.test)
    traps = []
    for scene, syn in zip(data.test, data.test_synthetic):
        traps += trap_pair_outcomes(model, scene, syn, spec.contact_radius)
    res = RunResult(name, seed, report["miou"], report["macc"], report["per_class_iou"],
                    len(traps), int(sum(traps)), time.perf_counter() - t0)
    if log is not None:
        log(json.dumps(asdict(res)))
    return res


def run_matrix(spec: BenchmarkSpec, variants: dict, log=None, data: Dataset | None = None) -> dict:
    """Train every named config over every seed; returns name -> list of RunResult."""
    data = data or Dataset(spec)
    out = {}
    for name, cfg in variants.items():
        out[name] = [run_one(data, name, cfg, s, log) for s in spec.seeds]
    return out


def branch_variants(base: ModelConfig) -> dict:
    return {
        "geo_only": replace(base, branch="geo_only"),
        "euc_only": replace(base, branch="euc_only"),
        "euc_intra": replace(base, branch="euc_intra"),
        "full": replace(base, branch="full"),
    }


def summarize(results: dict) -> dict:
    rows = {}
    for name, runs in results.items():
        rows[name] = dict(
            miou=float(np.mean([r.miou for r in runs])) * 100,
            miou_std=float(np.std([r.miou for r in runs])) * 100,
            macc=float(np.mean([r.macc for r in runs])) * 100,
            trap_total=int(sum(r.trap_total for r in runs)),
            trap_separated=int(sum(r.trap_separated for r in runs)),
            trap_failures=int(sum(r.trap_failures for r in runs)),
        )
    return rows


def format_table(rows: dict) -> str:
    lines = [f"{'model':<12} {'mIoU':>7} {'+-':>6} {'mAcc':>7} {'traps ok':>10}"]
    for name, r in rows.items():
        lines.append(f"{name:<12} {r['miou']:7.2f} {r['miou_std']:6.2f} {r['macc']:7.2f} "
                     f"{r['trap_separated']:>4}/{r['trap_total']:<5}")
    return "\n".join(lines)
