import csv
import json

import numpy as np
import pytest

from lrrg import tensor as T
from lrrg.checkpoint import load_checkpoint, save_checkpoint
from lrrg.cli import main
from lrrg.config import ABLATIONS, ConfigError, RunConfig, ablation_overrides
from lrrg.metrics import ce_scores, metrics_record
from lrrg.synth import generate_corpus, load_corpus, rule_label, select_split
from lrrg.system import ReportModel
from lrrg.text import words
from lrrg.train import (EPOCH_FIELDS, EVAL_FIELDS, STEP_FIELDS, augment_images, evaluate, progression_cells,
                        rotate_bilinear, train)

SMALL = dict(stage_channels=(4, 8), text_dim=8, d_model=8, n_layers=1, n_heads=2, d_ff=16, max_gen_len=12,
             lr=1e-3, epochs=1, batch_size=8)


def small_config(**changes):
    return RunConfig(**{**SMALL, **changes})


@pytest.fixture(scope="module")
def records():
    return generate_corpus(11, 32, 2, 0.5).records


def header(path):
    with open(path, newline="") as fh:
        return next(csv.reader(fh))


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- config ------------------------------------------------------------------------------

def test_config_json_round_trip(tmp_path):
    cfg = RunConfig(seed=3, stage_channels=(8, 16, 32), lr=1e-3, precision="f64").with_ablation("no-dam")
    cfg.save(tmp_path / "c.json")
    back = RunConfig.load(tmp_path / "c.json")
    assert back == cfg and back.ablation == "no-dam"


def test_config_rejects_unknown_and_invalid(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"seed": 1, "bogus": 2}))
    with pytest.raises(ConfigError, match="bogus"):
        RunConfig.load(tmp_path / "c.json")
    with pytest.raises(ConfigError):
        RunConfig(d_model=10, n_heads=4)
    with pytest.raises(ConfigError):
        RunConfig(precision="f16")
    with pytest.raises(ConfigError):
        ablation_overrides("no-everything")


def test_ablation_presets():
    assert RunConfig().ablation == "none"
    assert RunConfig().with_ablation("no-msf").multi_stage_fusion is False
    assert RunConfig().with_ablation("no-dam").ddam_enabled is False
    assert RunConfig().with_ablation("no-fam").dfam_enabled is False
    assert RunConfig().with_ablation("no-df").dynamic_fusion_enabled is False
    assert {RunConfig().with_ablation(a).ablation for a in ABLATIONS} == set(ABLATIONS)


@pytest.mark.parametrize("name", ABLATIONS)
def test_every_ablation_trains_and_generates(name, records):
    cfg = small_config(precision="f64").with_ablation(name)
    model = ReportModel(cfg)
    losses = model.losses(model.collate(records[:6]))
    T.backward(losses.total)
    out = model.generate(records[:3])
    assert len(out) == 3 and np.isfinite(losses.total.item())


# -- training ------------------------------------------------------------------------------

def test_training_is_deterministic(tmp_path, records):
    cfg = small_config()
    a = train(cfg, records, tmp_path / "a")
    b = train(cfg, records, tmp_path / "b")
    assert a.steps == b.steps
    for name, t in a.model.store.items():
        np.testing.assert_array_equal(t.data, b.model.store[name].data)
    assert (tmp_path / "a" / "steps.csv").read_bytes() == (tmp_path / "b" / "steps.csv").read_bytes()


def test_logged_loss_composes(tmp_path, records):
    train(small_config(loss_weight=4.0, epochs=2), records, tmp_path)
    logged = rows(tmp_path / "steps.csv")
    assert len(logged) == 2 * int(np.ceil(len(records) / 8))
    for r in logged:
        lm, cc, cp = float(r["lm"]), float(r["ce_cur"]), float(r["ce_prior"])
        assert abs(float(r["loss"]) - (lm + 4 * (cc + cp))) < 1e-6
        if r["n_prior"] == "0":
            assert cp == 0.0


def test_csv_headers_are_golden(tmp_path, records):
    result = train(small_config(), records, tmp_path)
    evaluate(result.model, records[:8], tmp_path)
    assert header(tmp_path / "steps.csv") == ["epoch", "step", "loss", "lm", "ce_cur", "ce_prior", "n", "n_prior"]
    assert header(tmp_path / "epochs.csv") == ["epoch", "loss", "lm", "ce_cur", "ce_prior", "seconds"]
    assert header(tmp_path / "metrics.csv") == list(EVAL_FIELDS)
    assert tuple(header(tmp_path / "steps.csv")) == STEP_FIELDS
    assert tuple(header(tmp_path / "epochs.csv")) == EPOCH_FIELDS
    for name in ("steps.csv", "epochs.csv", "metrics.csv"):
        for r in rows(tmp_path / name):
            assert all(v != "" for v in r.values())


def test_training_reduces_loss(records):
    result = train(small_config(epochs=4, lr=3e-3), records)
    assert result.epochs[-1]["loss"] < result.epochs[0]["loss"]


def test_augmentation_is_seeded_and_shape_preserving(records):
    imgs = np.stack([r.image for r in records[:4]])
    a = augment_images(imgs, np.random.default_rng(0))
    b = augment_images(imgs, np.random.default_rng(0))
    np.testing.assert_array_equal(a, b)
    assert a.shape == imgs.shape and not np.array_equal(a, imgs)
    x = np.random.default_rng(1).uniform(size=(1, 7, 7))
    np.testing.assert_array_equal(rotate_bilinear(x, 0.0), x)
    np.testing.assert_allclose(rotate_bilinear(x, 90.0)[0], np.rot90(x[0], -1), atol=1e-12)
    cfg = small_config(augment=True)
    assert train(cfg, records).steps == train(cfg, records).steps


def test_empty_training_set_rejected():
    with pytest.raises(ValueError):
        train(small_config(), [])


# -- checkpoints ---------------------------------------------------------------------

@pytest.mark.parametrize("precision", ["f32", "f64"])
def test_checkpoint_round_trip_is_bit_exact(tmp_path, records, precision):
    result = train(small_config(precision=precision), records[:16], tmp_path)
    model = result.model
    save_checkpoint(tmp_path / "ck.npz", model, result.optimizer, 1, result.epochs)
    back, optim, head = load_checkpoint(tmp_path / "ck.npz")
    assert head["epoch"] == 1 and head["config"] == model.cfg.to_dict()
    batch = model.collate(records[:10])
    with T.precision(precision):
        a, b = model.encode(batch, trace=True), back.encode(back.collate(records[:10]), trace=True)
        np.testing.assert_array_equal(a.current.data, b.current.data)
        np.testing.assert_array_equal(a.current_logits.data, b.current_logits.data)
        for x, y in zip(a.trace["prior"], b.trace["prior"]):
            np.testing.assert_array_equal(x, y)
        assert model.losses(batch).total.item() == back.losses(back.collate(records[:10])).total.item()
        assert [g[1] for g in model.generate(records[:10])] == [g[1] for g in back.generate(records[:10])]
    for k, v in result.optimizer.state_dict().items():
        np.testing.assert_array_equal(np.asarray(v), optim[k])


def test_checkpoint_version_mismatch(tmp_path):
    model = ReportModel(small_config())
    save_checkpoint(tmp_path / "ck.npz", model)
    data = dict(np.load(tmp_path / "ck.npz"))
    head = json.loads(str(data["header"]))
    head["format_version"] = 99
    data["header"] = np.array(json.dumps(head))
    np.savez(tmp_path / "bad.npz", **data)
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(tmp_path / "bad.npz")


# -- evaluation ----------------------------------------------------------------------------

def test_gold_self_evaluation_is_perfect(records, monkeypatch):
    model = ReportModel(small_config())
    monkeypatch.setattr(model, "generate",
                        lambda recs, beam_width=None: [(r, r.report, _Result(), r.labels) for r in recs])
    rec = evaluate(model, records)
    assert rec["ce_f1_micro"] == 1.0 and rec["bleu1"] == 1.0 and rec["bleu4"] == 1.0 and rec["rougeL"] == 1.0
    assert rec["progression_f1_micro"] == 1.0


class _Result:
    terminated_by = "eos"
    tokens = [2]


def test_zero_split_holds_only_no_prior_records(records):
    assert all(not r.has_prior for r in select_split(records, "fraction=0"))
    assert all(r.has_prior for r in select_split(records, "fraction=1"))


def test_progression_cells():
    c = generate_corpus(2, 40, 2, 1.0).records
    pred, gold = progression_cells(c, [r.labels for r in c])
    assert len(pred) == sum(len(r.progression) for r in c) and np.array_equal(pred, gold)


def test_evaluate_empty_split():
    with pytest.raises(ValueError):
        evaluate(ReportModel(small_config()), [])


# -- command line --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def cli_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    small_config().save(root / "cfg.json")
    assert main(["gen-data", "--config", str(root / "cfg.json"), "--out", str(root / "data"),
                 "--train-patients", "12", "--test-patients", "6"]) == 0
    assert main(["train", "--config", str(root / "cfg.json"), "--data", str(root / "data"),
                 "--out", str(root / "run")]) == 0
    return root


def test_cli_train_writes_artifacts(cli_run):
    for name in ("checkpoint.npz", "steps.csv", "epochs.csv", "config.json"):
        assert (cli_run / "run" / name).exists()


@pytest.mark.parametrize("split", ["all", "no-prior", "with-prior", "fraction=0.5"])
def test_cli_eval_recomputes_offline(cli_run, split, capsys):
    assert main(["eval", str(cli_run / "run" / "checkpoint.npz"), "--data", str(cli_run / "data"),
                 "--split", split, "--out", str(cli_run / "eval")]) == 0
    tag = split.replace("=", "")
    emitted = json.loads((cli_run / "eval" / f"metrics_{tag}.json").read_text())
    texts = (cli_run / "eval" / f"reports_{tag}.txt").read_text().splitlines()
    recs = select_split(load_corpus(cli_run / "data" / "test").records, split)
    assert len(texts) == len(recs) == emitted["n_samples"]
    pred = [rule_label(t) for t in texts]
    offline = metrics_record(pred, [r.labels for r in recs], [words(t) for t in texts],
                             [words(r.report) for r in recs], sum(r.has_prior for r in recs))
    for k, v in offline.items():
        assert emitted[k] == v, k
    p, g = progression_cells(recs, pred)
    assert emitted["progression_f1_micro"] == (ce_scores(p[:, None], g[:, None]).f1_micro if len(p) else 0.0)


def test_cli_generate_and_beam(cli_run):
    ck = str(cli_run / "run" / "checkpoint.npz")
    assert main(["generate", ck, "--data", str(cli_run / "data"), "--out", str(cli_run / "g1")]) == 0
    assert main(["generate", ck, "--data", str(cli_run / "data"), "--out", str(cli_run / "g3"), "--beam", "3"]) == 0
    n = len(load_corpus(cli_run / "data" / "test"))
    assert len((cli_run / "g1" / "generated.txt").read_text().splitlines()) == n
    assert len((cli_run / "g3" / "generated.jsonl").read_text().splitlines()) == n


def test_cli_ablate(cli_run):
    out = cli_run / "ablate"
    assert main(["ablate", "--config", str(cli_run / "cfg.json"), "--data", str(cli_run / "data"), "--out", str(out),
                 "--ablations", "none,no-dam", "--seeds", "0,1", "--split", "all,no-prior"]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert {(r["ablation"], r["split"]) for r in summary} == {(a, s) for a in ("none", "no-dam")
                                                              for s in ("all", "no-prior")}
    assert all(r["n_seeds"] == 2 for r in summary)
    assert len(rows(out / "runs.csv")) == 8


def test_cli_gradcheck(tmp_path):
    assert main(["gradcheck", "--out", str(tmp_path / "g.json")]) == 0
    results = json.loads((tmp_path / "g.json").read_text())
    assert max(r["max_rel_error"] for r in results.values()) < 1e-4


def test_cli_errors(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "r")]) == 2
    assert "error" in capsys.readouterr().err
    (tmp_path / "bad.json").write_text('{"n_heads": 3}')
    assert main(["train", "--config", str(tmp_path / "bad.json")]) == 2
    with pytest.raises(SystemExit):
        main(["train", "--ablation", "no-such"])
