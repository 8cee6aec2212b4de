"""Experiment orchestration: config, two-stage training, the x-shot grid.

A run fans out over (x_shot, seed) cells. Each cell splits the corpus, trains
the stage-1 generators (unless ablated), synthesizes target-class pseudo
pairs, trains the stage-2 projection, and evaluates target and source mAP
plus a raw-feature baseline through the same harness. Cells fail
independently; the RunRecord keeps every report, curve, checkpoint path, and
the fully resolved config.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from . import checkpoint as ckpt
from . import retrieval
from .data import Corpus, load_corpus, split_xshot, synth_corpus, write_corpus
from .errors import ConfigError
from .generation import GenHyperParams, synthesize_target_set, train_generation
from .projection import ProjHyperParams, RawFeatures, train_projection
from .util import fingerprint, write_json

ARTIFACT_VERSION = "0.1.0"


@dataclass
class SyntheticSpec:
    n_classes: int = 8
    per_class: int = 50
    dim: int = 64
    modality_gap: float = 5.0
    noise_sigma: float = 0.08
    proto_rank: int | None = 3
    unit_norm: bool = True
    seed: int = 2024


@dataclass
class DataFiles:
    images: str
    texts: str
    labels: str
    attrs: str
    attr_ids: str


@dataclass
class AblationFlags:
    no_vae: bool = False
    no_generation: bool = False
    no_gate: bool = False
    no_l1: bool = False
    no_l2: bool = False
    no_l3: bool = False


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    synthetic: SyntheticSpec | None = None
    files: DataFiles | None = None
    x_shots: list[int] = field(default_factory=lambda: [0, 1, 3, 5, 7])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    gen: GenHyperParams = field(default_factory=GenHyperParams)
    proj: ProjHyperParams = field(default_factory=ProjHyperParams)
    gen_num: int = 30
    query_fraction: float = 0.5
    source_eval_fraction: float = 0.25
    ablations: AblationFlags = field(default_factory=AblationFlags)
    out_dir: str | None = None

    def __post_init__(self):
        if self.synthetic is None and self.files is None:
            raise ConfigError("config needs either a synthetic spec or corpus files")
        if self.synthetic is not None and self.files is not None:
            raise ConfigError("config cannot name both a synthetic spec and corpus files")
        if self.gen_num <= 0:
            raise ConfigError(f"gen_num must be positive, got {self.gen_num}")
        if not self.x_shots:
            raise ConfigError("x_shots must not be empty")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")

    def resolved(self) -> dict:
        out = asdict(self)
        out["artifact_version"] = ARTIFACT_VERSION
        return out

    def fingerprint(self) -> str:
        resolved = self.resolved()
        resolved.pop("out_dir")
        return fingerprint(resolved)


def _build_section(cls, payload: dict, path: str):
    known = {f.name for f in fields(cls)}
    unknown = set(payload) - known
    if unknown:
        raise ConfigError(f"unknown config keys under {path}: {sorted(unknown)}")
    return cls(**payload)


def config_from_dict(payload: dict) -> ExperimentConfig:
    """Build a validated config; unknown keys anywhere are rejected."""
    payload = dict(payload)
    sections = {
        "synthetic": SyntheticSpec,
        "files": DataFiles,
        "gen": GenHyperParams,
        "proj": ProjHyperParams,
        "ablations": AblationFlags,
    }
    built = {}
    for key, cls in sections.items():
        if key in payload and payload[key] is not None:
            section = payload.pop(key)
            if not isinstance(section, dict):
                raise ConfigError(f"config section {key!r} must be a mapping")
            built[key] = _build_section(cls, section, key)
        else:
            payload.pop(key, None)
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(payload) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return ExperimentConfig(**payload, **built)


# stage-1 / stage-2 batch sizes, learning rates, and per-class generation
# counts for the four benchmark embedding sets, plus the desk-scale preset
PRESETS: dict[str, dict] = {
    "synthetic": {
        "name": "synthetic",
        "synthetic": {},
        "gen": {"lr": 1e-3, "batch": 64, "epochs": 60, "seed": 0},
        "proj": {"lr": 1e-3, "batch": 64, "epochs": 40, "seed": 0, "tau": 0.1},
        "gen_num": 30,
    },
    "wikipedia": {
        "name": "wikipedia",
        "gen": {"lr": 1e-3, "batch": 256, "epochs": 50},
        "proj": {"lr": 1e-3, "batch": 256, "epochs": 50},
        "gen_num": 70,
    },
    "pascal": {
        "name": "pascal",
        "gen": {"lr": 1e-3, "batch": 64, "epochs": 50},
        "proj": {"lr": 4e-4, "batch": 64, "epochs": 50},
        "gen_num": 30,
    },
    "nuswide": {
        "name": "nuswide",
        "gen": {"lr": 2e-3, "batch": 512, "epochs": 50},
        "proj": {"lr": 4e-4, "batch": 512, "epochs": 50},
        "gen_num": 500,
    },
    "nuswide10k": {
        "name": "nuswide10k",
        "gen": {"lr": 1e-3, "batch": 2048, "epochs": 50},
        "proj": {"lr": 5e-3, "batch": 2048, "epochs": 50},
        "gen_num": 300,
    },
}


def preset_config(name: str, **overrides) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    payload = {k: (dict(v) if isinstance(v, dict) else v) for k, v in PRESETS[name].items()}
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(payload.get(key), dict):
            payload[key].update(value)
        else:
            payload[key] = value
    return config_from_dict(payload)


def load_config_corpus(config: ExperimentConfig) -> Corpus:
    if config.synthetic is not None:
        s = config.synthetic
        return synth_corpus(
            n_classes=s.n_classes,
            per_class=s.per_class,
            dim=s.dim,
            modality_gap=s.modality_gap,
            noise_sigma=s.noise_sigma,
            seed=s.seed,
            unit_norm=s.unit_norm,
            proto_rank=s.proto_rank,
            name=config.name,
        )
    f = config.files
    return load_corpus(f.images, f.texts, f.labels, f.attrs, f.attr_ids, name=config.name)


def _file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _report_json(result: dict, split, config: ExperimentConfig) -> dict:
    return {
        "img2txt": result["img2txt"].to_json(),
        "txt2img": result["txt2img"].to_json(),
        "avg": result["avg"],
        "split": split.describe(),
        "config_fingerprint": config.fingerprint(),
    }


def run_cell(corpus: Corpus, x_shot: int, seed: int, config: ExperimentConfig) -> dict:
    """One (x_shot, seed) grid cell: split, two training stages, evaluation."""
    abl = config.ablations
    timings: dict[str, float] = {}
    cell: dict = {"x_shot": x_shot, "seed": seed, "timings": timings, "checkpoints": {}}

    split = split_xshot(
        corpus,
        x_shot,
        seed,
        query_fraction=config.query_fraction,
        source_eval_fraction=config.source_eval_fraction,
    )

    out_dir = None
    if config.out_dir is not None:
        out_dir = Path(config.out_dir) / f"cell_x{x_shot}_s{seed}"
        out_dir.mkdir(parents=True, exist_ok=True)

    pseudo = None
    gen_curves = None
    if not abl.no_generation:
        t0 = time.perf_counter()
        gen_hp = replace(config.gen, seed=seed)
        img_model, txt_model, gen_curves = train_generation(
            split, corpus, gen_hp, use_vae=not abl.no_vae
        )
        timings["stage1"] = time.perf_counter() - t0
        pseudo = synthesize_target_set(
            (img_model, txt_model),
            split.target_classes,
            corpus.class_attrs,
            config.gen_num,
            seed=seed,
        )
        if out_dir is not None:
            ckpt.save_vaegan(img_model, out_dir / "gen_img.ckpt")
            ckpt.save_vaegan(txt_model, out_dir / "gen_txt.ckpt")
            cell["checkpoints"]["gen_img"] = str(out_dir / "gen_img.ckpt")
            cell["checkpoints"]["gen_txt"] = str(out_dir / "gen_txt.ckpt")

    stage1_sums = {
        name: _file_sha256(path) for name, path in cell["checkpoints"].items()
    }

    t0 = time.perf_counter()
    proj_hp = replace(
        config.proj,
        seed=seed,
        alpha=0.0 if abl.no_l1 else config.proj.alpha,
        beta=0.0 if abl.no_l2 else config.proj.beta,
        gamma=0.0 if abl.no_l3 else config.proj.gamma,
    )
    model, proj_curve = train_projection(
        split, corpus, pseudo, proj_hp, use_gate=not abl.no_gate
    )
    timings["stage2"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    fp = config.fingerprint()
    target = retrieval.evaluate(model, split, corpus, domain="target", fingerprint=fp)
    source = retrieval.evaluate(model, split, corpus, domain="source", fingerprint=fp)
    baseline = retrieval.evaluate(RawFeatures(), split, corpus, domain="target", fingerprint=fp)
    timings["evaluate"] = time.perf_counter() - t0

    if out_dir is not None:
        ckpt.save_projection(model, out_dir / "projection.ckpt")
        cell["checkpoints"]["projection"] = str(out_dir / "projection.ckpt")
        for name, digest in stage1_sums.items():
            if _file_sha256(cell["checkpoints"][name]) != digest:
                raise RuntimeError(
                    f"stage-1 checkpoint {name} changed during stage 2; "
                    "stage separation violated"
                )

    cell["reports"] = {
        "target": _report_json(target, split, config),
        "source": _report_json(source, split, config),
        "baseline_target": _report_json(baseline, split, config),
    }
    cell["curves"] = {"generation": gen_curves, "projection": proj_curve}
    if out_dir is not None:
        write_json(
            out_dir / "reports.json",
            {"config": config.resolved(), **cell["reports"]},
        )
    return cell


def run_experiment(config: ExperimentConfig) -> dict:
    """Full (x_shot, seed) grid; cells fail independently.

    Returns the RunRecord dict; with an out_dir it is also written to
    run_record.json alongside per-cell checkpoints and reports.
    """
    corpus = load_config_corpus(config)
    record = {
        "artifact_version": ARTIFACT_VERSION,
        "config": config.resolved(),
        "config_fingerprint": config.fingerprint(),
        "corpus": {"name": corpus.name, "instances": len(corpus), "dim": corpus.dim},
        "cells": [],
        "failures": 0,
    }
    for x_shot in config.x_shots:
        for seed in config.seeds:
            try:
                cell = run_cell(corpus, x_shot, seed, config)
            except Exception as e:  # cell errors are recorded, the grid continues
                cell = {"x_shot": x_shot, "seed": seed, "error": f"{type(e).__name__}: {e}"}
                record["failures"] += 1
            record["cells"].append(cell)
    if config.out_dir is not None:
        out = Path(config.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "run_record.json", record)
    return record


def make_data(spec: SyntheticSpec, out_dir, name: str = "synthetic") -> dict[str, str]:
    corpus = synth_corpus(
        n_classes=spec.n_classes,
        per_class=spec.per_class,
        dim=spec.dim,
        modality_gap=spec.modality_gap,
        noise_sigma=spec.noise_sigma,
        seed=spec.seed,
        unit_norm=spec.unit_norm,
        proto_rank=spec.proto_rank,
        name=name,
    )
    return write_corpus(corpus, out_dir)


def eval_checkpoint(
    checkpoint_path,
    config: ExperimentConfig,
    x_shot: int,
    seed: int,
    domain: str = "target",
) -> dict:
    """Load a projection checkpoint and score it on a freshly built split."""
    model = ckpt.load_projection(checkpoint_path)
    corpus = load_config_corpus(config)
    split = split_xshot(
        corpus,
        x_shot,
        seed,
        query_fraction=config.query_fraction,
        source_eval_fraction=config.source_eval_fraction,
    )
    result = retrieval.evaluate(model, split, corpus, domain=domain, fingerprint=config.fingerprint())
    return _report_json(result, split, config)
