import csv
import hashlib

import numpy as np
import pytest

from raml import pipeline
from raml.backbone import EmbeddingBatch, load_params
from raml.cli import main
from raml.config import ExperimentConfig, parse_mask
from raml.errors import ConfigError, DomainError
from raml.stores import load_embeddings, read_results, save_embeddings
from raml.trainer import read_trace

TINY = """\
dataset.num_classes=4
dataset.images_per_class=6
dataset.base_resolution=32
backbone.channels=4,8
backbone.embed_dim=8
teacher.epochs=2
teacher.batch_classes=2
teacher.batch_per_class=3
distill.epochs=1
distill.batch_size=4
distill.augmentations=2
distill.scales=0.7,0.5,0.35
eval.scales=0.7,0.5,0.35
ablate.seeds=0
ablate.epochs=1
ablate.scale=0.5
ablate.coupled=1,0
ablate.loss_masks=abs-only,rel_ts-only,rel_ss-only
ablate.init_modes=teacher_large,fresh
ablate.augmentations=2
"""


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def tree_digest(root):
    return {str(p.relative_to(root)): sha(p) for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return path


def run(*args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    out = root / "out"
    for cmd in ("gen-data", "train-teacher", "distill", "eval", "tradeoff", "ablate", "flops"):
        assert run(cmd, "--config", cfg, "--out", out) == 0, cmd
    return cfg, out


# -- config -------------------------------------------------------------------

def test_config_defaults_and_roundtrip(tmp_path):
    cfg = ExperimentConfig.load()
    assert cfg.dataset_spec().num_classes == 20 and cfg.teacher_config().epochs == 40
    path = tmp_path / "c.cfg"
    path.write_text(cfg.dumps())
    assert ExperimentConfig.load(path).values == cfg.values
    full = ExperimentConfig.load(profile="full")
    assert full.teacher_config().epochs == 200 and full.distill_config().examples_per_epoch == 8000


def test_config_rejects_unknown_key_with_line(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("dataset.seed=1\n# comment\nteacher.colour=blue\n")
    with pytest.raises(ConfigError) as info:
        ExperimentConfig.load(path)
    assert info.value.line == 3


@pytest.mark.parametrize("text", ["distill.init_mode=random\n", "distill.loss_mask=abs+bogus\n",
                                  "teacher.epochs=many\n", "eval.setups=teacher_symmetric,odd\n", "no equals sign\n"])
def test_config_rejects_bad_values(tmp_path, text):
    path = tmp_path / "c.cfg"
    path.write_text(text)
    with pytest.raises(ConfigError):
        ExperimentConfig.load(path)


def test_mask_names():
    assert parse_mask("abs-only") == ("abs",)
    assert parse_mask("abs+rel_ss") == ("abs", "rel_ss")
    assert parse_mask("all") == ("abs", "rel_ts", "rel_ss")


# -- embedding store ----------------------------------------------------------

def test_embedding_store_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    v = rng.normal(size=(7, 5)).astype(np.float32)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    save_embeddings(EmbeddingBatch(v, "student", 22), np.arange(7) % 3, tmp_path / "e.emb")
    blob = (tmp_path / "e.emb").read_bytes()
    assert blob[:8] == b"RAMLEMB1"
    batch, labels = load_embeddings(tmp_path / "e.emb")
    assert batch.vectors.tobytes() == v.tobytes()
    assert (batch.encoder, batch.resolution) == ("student", 22)
    assert labels.tolist() == (np.arange(7) % 3).tolist()


def test_embedding_store_rejects_non_unit_rows(tmp_path):
    with pytest.raises(DomainError):
        save_embeddings(EmbeddingBatch(np.full((2, 3), 0.9, np.float32), "teacher", 64), [0, 1], tmp_path / "e.emb")


def test_embedding_store_rejects_truncation(tmp_path):
    v = np.eye(3, dtype=np.float32)
    save_embeddings(EmbeddingBatch(v, "teacher", 64), [0, 1, 2], tmp_path / "e.emb")
    (tmp_path / "e.emb").write_bytes((tmp_path / "e.emb").read_bytes()[:-4])
    with pytest.raises(ConfigError):
        load_embeddings(tmp_path / "e.emb")


# -- commands -----------------------------------------------------------------

def test_gen_data_counts_and_idempotence(tmp_path):
    assert run("gen-data", "--out", tmp_path / "a") == 0
    assert len(list((tmp_path / "a" / "data").glob("*.img"))) == 600
    first = tree_digest(tmp_path / "a")
    assert run("gen-data", "--out", tmp_path / "a") == 0
    assert tree_digest(tmp_path / "a") == first


def test_missing_dataset_exit_code(tmp_path, tiny_config, capsys):
    assert run("train-teacher", "--config", tiny_config, "--out", tmp_path / "none") == 2
    assert str(tmp_path / "none") in capsys.readouterr().err


def test_corrupt_meta_exit_code(tmp_path, tiny_config, capsys):
    out = tmp_path / "o"
    assert run("gen-data", "--config", tiny_config, "--out", out) == 0
    meta = out / "data" / "meta"
    lines = meta.read_text().splitlines()
    lines[1] = "garbage"
    meta.write_text("\n".join(lines) + "\n")
    assert run("train-teacher", "--config", tiny_config, "--out", out) == 3
    assert ":2:" in capsys.readouterr().err


def test_bad_config_exit_code(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("unknown.key=1\n")
    assert run("flops", "--config", bad, "--out", tmp_path) == 3
    assert run("flops", "--config", tmp_path / "absent.cfg") == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure_exit_code(tmp_path, tiny_config):
    text = tiny_config.read_text() + "teacher.max_lr=1e30\n"
    tiny_config.write_text(text)
    out = tmp_path / "o"
    assert run("gen-data", "--config", tiny_config, "--out", out) == 0
    assert run("train-teacher", "--config", tiny_config, "--out", out) == 4


def test_teacher_file_roundtrip_and_rerun(tiny_run, tmp_path):
    cfg, out = tiny_run
    path = out / "teachers" / "teacher_s1_seed0.par"
    params = load_params(path)
    assert params.role == "teacher"
    before = sha(path)
    assert run("train-teacher", "--config", cfg, "--out", out) == 0
    assert sha(path) == before
    trace = read_trace(out / "teachers" / "teacher_s1_seed0_trace.csv")
    assert len(trace) > 0


def test_distill_outputs(tiny_run):
    _, out = tiny_run
    files = sorted((out / "students").glob("*.par"))
    assert len(files) == 9
    names = {p.name for p in files}
    assert "student_s0.35_teacher_large_all_coupled_a2_seed2.par" in names


def test_distill_leaves_teacher_unchanged(tiny_run):
    cfg, out = tiny_run
    teacher = out / "teachers" / "teacher_s1_seed0.par"
    before = sha(teacher)
    assert run("distill", "--config", cfg, "--out", out) == 0
    assert sha(teacher) == before


def test_abs_only_trace_has_zero_relational_columns(tiny_run):
    _, out = tiny_run
    trace = out / "ablation" / "student_s0.5_teacher_large_abs-only_noncoupled_a2_seed0_trace.csv"
    rows = read_trace(trace)
    assert rows and all(r.loss_rel_ts == 0.0 and r.loss_rel_ss == 0.0 for r in rows)


def test_results_table_contract(tiny_run):
    _, out = tiny_run
    rows = read_results(out / "results.csv")
    assert all(0.0 <= r.map <= 1.0 and 0.0 <= r.r_at_1 <= 1.0 for r in rows)
    means = [r for r in rows if r.is_mean]
    for m in means:
        members = [r.map for r in rows if not r.is_mean and (r.experiment, r.setup, r.query_scale)
                   == (m.experiment, m.setup, m.query_scale)]
        assert abs(m.map - sum(members) / len(members)) <= 1e-9
    student_rows = [r for r in rows if r.setup == "teacher_student_asymmetric" and not r.is_mean]
    assert len(student_rows) == 9
    keys = [(r.experiment, r.setup, r.query_scale, r.seed) for r in rows]
    assert len(keys) == len(set(keys))


def test_eval_from_stores_matches_table(tiny_run):
    _, out = tiny_run
    rows = [r for r in read_results(out / "results.csv") if not r.is_mean]
    for r in rows[:6]:
        base = out / "embeddings" / f"{r.experiment}_seed{r.seed}_{r.setup}_s{r.query_scale:g}"
        m, r1 = pipeline.evaluate_stores(base.with_name(base.name + "_query.emb"),
                                         base.with_name(base.name + "_db.emb"))
        assert (m, r1) == (r.map, r.r_at_1)


def test_stores_match_in_memory_evaluation(tiny_run):
    from raml.retrieval import make_setup, evaluate_setup
    from raml.dataio import load_dataset
    _, out = tiny_run
    _, test = load_dataset(out / "data").split()
    teacher = load_params(out / "teachers" / "teacher_s1_seed0.par")
    student = load_params(out / "students" / "student_s0.5_teacher_large_all_coupled_a2_seed0.par")
    report = evaluate_setup(teacher, student, test.images, test.labels,
                            make_setup("teacher_student_asymmetric", 32, 0.5))
    row = [r for r in read_results(out / "results.csv") if r.setup == "teacher_student_asymmetric"
           and r.seed == "0" and r.query_scale == 0.5][0]
    assert (report.map, report.r_at_1) == (row.map, row.r_at_1)


def test_tradeoff_contract(tiny_run):
    cfg, out = tiny_run
    with open(out / "tradeoff.csv") as fh:
        points = list(csv.DictReader(fh))
    assert len(points) == 4 * 3
    gflops = [float(p["query_gflops"]) for p in points]
    assert gflops == sorted(gflops)


def test_tradeoff_empty_input(tmp_path, tiny_config):
    empty = tmp_path / "empty.csv"
    empty.write_text("experiment,setup,query_scale,query_res,db_res,map,r_at_1,query_gflops,num_queries,seed\n")
    assert run("tradeoff", "--config", tiny_config, "--out", tmp_path, "--results", empty) == 3
    assert run("tradeoff", "--config", tiny_config, "--out", tmp_path / "x") == 2


def test_ablation_grid(tiny_run):
    _, out = tiny_run
    rows = [r for r in read_results(out / "ablation.csv") if not r.is_mean]
    assert len({r.experiment for r in rows}) == 2 * 3 * 2
    assert len(rows) >= 6
    experiments = {r.experiment for r in rows}
    assert "student_s0.5_teacher_large_abs-only_noncoupled_a2" in experiments
    assert "student_s0.5_fresh_rel_ss-only_coupled_a2" in experiments


def test_flops_command(tiny_run, capsys):
    cfg, out = tiny_run
    assert run("flops", "--config", cfg, "--out", out) == 0
    printed = capsys.readouterr().out.splitlines()
    assert printed[0] == "scale,resolution,flops" and len(printed) == 5
    assert (out / "flops.csv").read_text().splitlines()[0] == "scale,resolution,flops,gflops"


def test_global_flags_after_subcommand(tmp_path):
    assert main(["flops", "--out", str(tmp_path), "--profile", "full"]) == 0
