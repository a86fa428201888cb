import csv
import io

import numpy as np
import pytest

import thermalgan.evaluation as ev
from thermalgan.dataio import DatasetManifest, load_pairs, read_png, split_by_subject, write_png
from thermalgan.evaluation import (
    EvalReport,
    EvaluationError,
    compare_architectures,
    compare_generalization,
    compare_styles,
    evaluate,
    evaluate_saved,
    per_sample_l1,
    write_table,
)
from thermalgan.synthscene import SceneConfig, generate_dataset
from thermalgan.train import TrainConfig, make_trainer, train

TINY = TrainConfig(image_side=16, base_width=4, levels=2, d_width=4, d_layers=1, resnet_width=4, n_blocks=1)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    generate_dataset(SceneConfig(image_side=16, samples_per_subject=20, n_subjects=3), str(root))
    return str(root / "index.tsv")


@pytest.fixture(scope="module")
def test_split(dataset):
    return split_by_subject(DatasetManifest.read(dataset), seed=0)[2]


def test_per_sample_l1_units():
    assert np.allclose(per_sample_l1(np.ones((2, 1, 4, 4)), np.zeros((2, 1, 4, 4))), 0.5)
    assert np.allclose(per_sample_l1(np.ones((1, 1, 2, 2)), -np.ones((1, 1, 2, 2))), 1.0)


def test_copying_ground_truth_scores_zero(test_split):
    rep = evaluate_saved(test_split.root, test_split)
    assert rep.mean == 0.0 and rep.std == 0.0
    assert len(rep.errors) == len(test_split)


def test_constant_prediction_scores_hand_value(test_split, tmp_path):
    expected = []
    for s in test_split.samples:
        truth = read_png(test_split.resolve(s.thermal)).astype(float)
        (tmp_path / s.thermal).parent.mkdir(parents=True, exist_ok=True)
        write_png(str(tmp_path / s.thermal), np.full(truth.shape, 128, np.uint8))
        expected.append(np.abs(128 - truth).mean() / 255)
    rep = evaluate_saved(str(tmp_path), test_split)
    assert np.allclose(rep.errors, expected)


def test_report_aggregates_subject_means():
    errors = [0.1, 0.3, 0.2, 0.6, 0.6, 0.6]
    subjects = [0, 0, 1, 1, 1, 1]
    rep = EvalReport(errors, subjects, range(6))
    # subject 0 mean 0.2, subject 1 mean 0.5; the pooled sample mean would be 0.4
    assert rep.per_subject == pytest.approx({0: 0.2, 1: 0.5})
    assert rep.mean == pytest.approx(0.35)
    assert rep.std == pytest.approx(0.15)
    assert "all\t6\t0.350000" in rep.to_text()


def test_report_rejects_empty_and_out_of_range():
    with pytest.raises(EvaluationError):
        EvalReport([], [], [])
    with pytest.raises(Exception):
        EvalReport([1.5], [0], [0])


def test_saved_outputs_recompute_the_score(dataset, test_split, tmp_path):
    state = make_trainer(TINY)
    train_m = split_by_subject(DatasetManifest.read(dataset), seed=0)[0]
    train(state, load_pairs(train_m, "front", 16), 5)
    rep = evaluate(state, test_split, save_dir=str(tmp_path))
    again = evaluate_saved(str(tmp_path), test_split)
    # the saved files are 8-bit, so each pixel moves by at most half a code
    assert np.max(np.abs(rep.errors - again.errors)) <= 0.5 / 255 + 1e-9


def test_evaluate_refuses_other_style(test_split):
    state = make_trainer(TINY)
    with pytest.raises(EvaluationError, match="front.*stacked"):
        evaluate(state, test_split, style="stacked")


def test_evaluate_from_checkpoint_matches_live_state(test_split, tmp_path):
    from thermalgan.checkpoint import save_checkpoint

    state = make_trainer(TINY.with_overrides(seed=4))
    path = save_checkpoint(state, str(tmp_path / "c.tgck"))
    a = evaluate(state, test_split)
    b = evaluate(path, test_split)
    assert np.array_equal(a.errors, b.errors)
    assert b.config_digest == TINY.with_overrides(seed=4).digest()


def test_style_comparison_table(dataset, tmp_path):
    table = compare_styles(dataset, [0], TINY, iterations=2, subjects=2)
    rows = list(csv.reader(io.StringIO(table.to_csv())))
    assert rows[0] == ["condition", "mean_l1", "std", "seeds", "verdict"]
    assert [r[0] for r in rows[1:]] == ["front", "tessellated", "stacked"]
    assert "stacked < front" in rows[3][4]
    csv_path, txt_path = write_table(table, str(tmp_path))
    text = open(txt_path).read()
    assert "reference values" in text and ("PASS" in text or "FAIL" in text)


def test_cells_shared_between_comparisons(dataset, monkeypatch):
    calls = []
    real = ev.run_cell

    def counting(manifest_path, cell, iterations, split_seed=0):
        calls.append(cell.condition)
        return real(manifest_path, cell, iterations, split_seed)

    monkeypatch.setattr(ev, "run_cell", counting)
    cache = {}
    compare_architectures(dataset, [0], TINY, 1, subjects=2, cache=cache)
    assert calls == ["pix2pix", "pix2pix", "cyclegan", "cyclegan"]
    calls.clear()
    table = compare_generalization(dataset, [0], TINY, 1, subjects=2, cache=cache)
    # the per-subject front-view pix2pix runs are reused; only the pooled model trains
    assert calls == ["multi-subject"]
    assert [r.condition for r in table.rows] == ["single-subject", "multi-subject"]


def test_verdict_majority_over_seeds():
    v = ev.Verdict("a < b", "a", "b", [True, False, True])
    assert v.passed
    assert not ev.Verdict("a < b", "a", "b", [True, False]).passed


def test_comparison_rejects_unknown_subjects(dataset):
    with pytest.raises(EvaluationError):
        compare_architectures(dataset, [0], TINY, 1, subjects=[9])
    with pytest.raises(EvaluationError):
        compare_generalization(dataset, [0], TINY, 1, subjects=[0])
