"""Experiment commands: each one reads inputs from and writes outputs to the run directory."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dataio
from .backbone import ModelParams, count_flops, load_params, save_params
from .config import ExperimentConfig, mask_name, parse_mask
from .errors import ConfigError
from .retrieval import (STUDENT_SYMMETRIC, TEACHER_ASYMMETRIC, TEACHER_STUDENT_ASYMMETRIC, TEACHER_SYMMETRIC,
                        RetrievalSetup, make_setup, retrieval_metrics, setup_embeddings)
from .stores import ResultRow, load_embeddings, read_results, save_embeddings, with_means, write_results
from .trainer import DistillConfig, distill_student, effective_terms, train_teacher, write_trace

log = logging.getLogger(__name__)

TEACHER_SETUPS = (TEACHER_SYMMETRIC, TEACHER_ASYMMETRIC)
STUDENT_SETUPS = (TEACHER_STUDENT_ASYMMETRIC, STUDENT_SYMMETRIC)


def fmt_scale(scale: float) -> str:
    return f"{scale:g}"


@dataclass(frozen=True)
class RunLayout:
    root: Path

    @property
    def data(self) -> Path:
        return self.root / "data"

    def teacher(self, scale: float, seed: int) -> Path:
        return self.root / "teachers" / f"teacher_s{fmt_scale(scale)}_seed{seed}.par"

    def student_stem(self, config: DistillConfig) -> str:
        coupling = "coupled" if config.coupled else "noncoupled"
        return (f"student_s{fmt_scale(config.scale_factor)}_{config.init_mode}_{mask_name(config.terms)}"
                f"_{coupling}_a{config.augmentations}")

    def student(self, config: DistillConfig, group: str = "students") -> Path:
        return self.root / group / f"{self.student_stem(config)}_seed{config.seed}.par"

    @property
    def embeddings(self) -> Path:
        return self.root / "embeddings"

    @property
    def results(self) -> Path:
        return self.root / "results.csv"

    @property
    def ablation(self) -> Path:
        return self.root / "ablation.csv"

    @property
    def tradeoff(self) -> Path:
        return self.root / "tradeoff.csv"

    @property
    def flops(self) -> Path:
        return self.root / "flops.csv"


def _trace_path(par: Path) -> Path:
    return par.with_name(par.stem + "_trace.csv")


def _layout(cfg: ExperimentConfig) -> RunLayout:
    return RunLayout(Path(cfg.output_dir))


def _load_split(cfg: ExperimentConfig):
    data = dataio.load_dataset(_layout(cfg).data)
    return data.split()


def _require(path: Path) -> Path:
    if not path.is_file():
        raise FileNotFoundError(f"missing input: {path}")
    return path


# -- commands -----------------------------------------------------------------

def cmd_gen_data(cfg: ExperimentConfig) -> Path:
    layout = _layout(cfg)
    data = dataio.gen_synthetic_dataset(cfg.dataset_spec())
    dataio.save_dataset(data, layout.data)
    (layout.root / "config.txt").write_text(cfg.dumps())
    return layout.data


def cmd_train_teacher(cfg: ExperimentConfig) -> list[Path]:
    layout = _layout(cfg)
    train, _ = _load_split(cfg)
    seed = cfg.teacher_config().seed
    written = []
    for scale in cfg.teacher_scales():
        result = train_teacher(train, cfg.backbone(), cfg.teacher_config(scale=scale))
        path = layout.teacher(scale, seed)
        path.parent.mkdir(parents=True, exist_ok=True)
        save_params(result.params, path)
        write_trace(result.trace, _trace_path(path))
        written.append(path)
        log.info("teacher at scale %s -> %s", fmt_scale(scale), path)
    return written


def _small_teacher(layout: RunLayout, config: DistillConfig, teacher_seed: int) -> ModelParams | None:
    if config.init_mode != "teacher_small":
        return None
    return load_params(_require(layout.teacher(config.scale_factor, teacher_seed)))


def run_student(cfg: ExperimentConfig, config: DistillConfig, group: str = "students") -> Path:
    layout = _layout(cfg)
    teacher_seed = cfg.teacher_config().seed
    teacher = load_params(_require(layout.teacher(1.0, teacher_seed)))
    train, _ = _load_split(cfg)
    result = distill_student(teacher, train.unlabeled(), config, _small_teacher(layout, config, teacher_seed))
    path = layout.student(config, group)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_params(result.params, path)
    write_trace(result.trace, _trace_path(path))
    return path


def cmd_distill(cfg: ExperimentConfig) -> list[Path]:
    written = []
    for scale in cfg.distill_scales():
        for seed in cfg.distill_seeds():
            written.append(run_student(cfg, cfg.distill_config(scale_factor=scale, seed=seed)))
    return written


def _store_and_score(layout: RunLayout, experiment: str, setup: RetrievalSetup, scale: float, query, database,
                     labels, flops_config, seed) -> ResultRow:
    base = layout.embeddings / f"{experiment}_seed{seed}_{setup.kind}_s{fmt_scale(scale)}"
    base.parent.mkdir(parents=True, exist_ok=True)
    q_path, d_path = base.with_name(base.name + "_query.emb"), base.with_name(base.name + "_db.emb")
    save_embeddings(query, labels, q_path)
    save_embeddings(database, labels, d_path)
    q, q_labels = load_embeddings(q_path)
    d, d_labels = load_embeddings(d_path)
    m, r1 = retrieval_metrics(q.vectors @ d.vectors.T, q_labels, d_labels)
    return ResultRow(experiment, setup.kind, scale, setup.query_resolution, setup.database_resolution, m, r1,
                     count_flops(flops_config, setup.query_resolution) / 1e9, len(labels), str(seed))


def evaluate_stores(query_path, database_path) -> tuple[float, float]:
    q, q_labels = load_embeddings(query_path)
    d, d_labels = load_embeddings(database_path)
    return retrieval_metrics(q.vectors @ d.vectors.T, q_labels, d_labels)


def _symmetric_teacher(layout: RunLayout, scale: float, seed: int) -> tuple[str, Path]:
    matched = layout.teacher(scale, seed)
    if matched.is_file():
        return matched.stem, matched
    large = _require(layout.teacher(1.0, seed))
    return large.stem, large


def evaluate_students(cfg: ExperimentConfig, students: list[tuple[DistillConfig, Path]],
                      setups=STUDENT_SETUPS) -> list[ResultRow]:
    layout = _layout(cfg)
    _, test = _load_split(cfg)
    base = test.images.shape[-1]
    teacher_seed = cfg.teacher_config().seed
    teacher = load_params(_require(layout.teacher(1.0, teacher_seed)))
    cache: dict = {}
    rows = []
    for config, path in students:
        student = load_params(_require(path))
        experiment = layout.student_stem(config)
        for kind in setups:
            setup = make_setup(kind, base, config.scale_factor)
            q, d = setup_embeddings(teacher, student, test.images, setup, cache)
            rows.append(_store_and_score(layout, experiment, setup, config.scale_factor, q, d, test.labels,
                                         teacher.config, config.seed))
    return rows


def cmd_eval(cfg: ExperimentConfig) -> Path:
    layout = _layout(cfg)
    _, test = _load_split(cfg)
    base = test.images.shape[-1]
    teacher_seed = cfg.teacher_config().seed
    teacher = load_params(_require(layout.teacher(1.0, teacher_seed)))
    setups = cfg.setups()
    rows = []
    cache: dict = {}
    for scale in cfg.eval_scales():
        for kind in setups:
            if kind not in TEACHER_SETUPS:
                continue
            setup = make_setup(kind, base, scale)
            if kind == TEACHER_SYMMETRIC:
                name, path = _symmetric_teacher(layout, scale, teacher_seed)
                params = load_params(path)
            else:
                name, params = layout.teacher(1.0, teacher_seed).stem, teacher
            q, d = setup_embeddings(params, None, test.images, setup, cache)
            rows.append(_store_and_score(layout, name.rsplit("_seed", 1)[0], setup, scale, q, d, test.labels,
                                         teacher.config, teacher_seed))
    student_setups = tuple(k for k in setups if k in STUDENT_SETUPS)
    if student_setups:
        students = []
        for scale in cfg.eval_scales():
            for seed in cfg.distill_seeds():
                config = cfg.distill_config(scale_factor=scale, seed=seed)
                students.append((config, _require(layout.student(config))))
        rows.extend(evaluate_students(cfg, students, student_setups))
    write_results(with_means(rows), layout.results)
    return layout.results


def tradeoff_points(rows: list[ResultRow]) -> list[tuple[str, float, int, float, float, int]]:
    """(setup, query scale, query res, GFLOPs, mean mAP, seed count), sorted by GFLOPs."""
    seed_rows = [r for r in rows if not r.is_mean]
    if not seed_rows:
        raise ConfigError("tradeoff needs a non-empty results table")
    groups: dict[tuple[str, float], list[ResultRow]] = {}
    for r in seed_rows:
        groups.setdefault((r.setup, r.query_scale), []).append(r)
    points = []
    for (setup, scale), members in groups.items():
        points.append((setup, scale, members[0].query_res, members[0].query_gflops,
                       math.fsum(r.map for r in members) / len(members), len(members)))
    order = {k: i for i, k in enumerate((TEACHER_SYMMETRIC, TEACHER_ASYMMETRIC, TEACHER_STUDENT_ASYMMETRIC,
                                         STUDENT_SYMMETRIC))}
    return sorted(points, key=lambda p: (p[3], order.get(p[0], 99), p[0]))


def cmd_tradeoff(cfg: ExperimentConfig, results_path=None) -> Path:
    layout = _layout(cfg)
    rows = read_results(results_path or layout.results)
    points = tradeoff_points(rows)
    lines = ["setup,query_scale,query_res,query_gflops,map_mean,num_seeds"]
    for setup, scale, res, gflops, m, n in points:
        lines.append(f"{setup},{fmt_scale(scale)},{res},{gflops!r},{m!r},{n}")
    layout.tradeoff.write_text("\n".join(lines) + "\n")
    return layout.tradeoff


def ablation_configs(cfg: ExperimentConfig) -> list[DistillConfig]:
    grid = cfg.ablate_grid()
    configs = []
    for coupled in grid["coupled"]:
        for mask in grid["loss_masks"]:
            for init in grid["init_modes"]:
                for views in grid["augmentations"]:
                    for seed in grid["seeds"]:
                        c = cfg.distill_config(scale_factor=grid["scale"], seed=seed, coupled=coupled,
                                               terms=parse_mask(mask), init_mode=init, augmentations=views,
                                               epochs=grid["epochs"])
                        try:
                            effective_terms(c)
                        except ConfigError:
                            log.warning("skipping %s with %d augmentations", mask, views)
                            continue
                        configs.append(c)
    return configs


def cmd_ablate(cfg: ExperimentConfig) -> Path:
    layout = _layout(cfg)
    students = [(c, run_student(cfg, c, group="ablation")) for c in ablation_configs(cfg)]
    rows = evaluate_students(cfg, students)
    write_results(with_means(rows), layout.ablation)
    return layout.ablation


def cmd_flops(cfg: ExperimentConfig) -> list[tuple[float, int, int]]:
    layout = _layout(cfg)
    bb = cfg.backbone()
    base = cfg.dataset_spec().base_resolution
    table = []
    for scale in cfg.flops_scales():
        res = dataio.scaled_resolution(base, scale)
        table.append((scale, res, count_flops(bb, res)))
    layout.root.mkdir(parents=True, exist_ok=True)
    layout.flops.write_text("scale,resolution,flops,gflops\n" + "".join(
        f"{fmt_scale(s)},{r},{f},{f / 1e9!r}\n" for s, r, f in table))
    return table


def mean_map(rows: list[ResultRow], setup: str, experiment: str | None = None, scale: float | None = None) -> float:
    """Mean over seed rows matching the filters."""
    picked = [r.map for r in rows if not r.is_mean and r.setup == setup
              and (experiment is None or r.experiment == experiment)
              and (scale is None or np.isclose(r.query_scale, scale))]
    if not picked:
        raise ConfigError(f"no rows for setup {setup!r} experiment {experiment!r} scale {scale!r}")
    return math.fsum(picked) / len(picked)
