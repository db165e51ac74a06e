import dataclasses
import hashlib

import numpy as np
import pytest

from semcom_sna._validation import ContractError
from semcom_sna.attack import AttackBudget
from semcom_sna.evaluation import (
    ConfigurationError,
    ResultRow,
    SweepConfig,
    compute_attack_success,
    curve_inventory,
    lookup,
    plot_curves,
    read_provenance,
    read_results,
    run_snr_sweep,
    spearman_trend,
    write_results,
)


def _row(model="natural", attack="none", snr=10.0, acc=0.9, eps=0.0, seed=0):
    return ResultRow(model, attack, snr, eps, acc, 100, seed)


def _table():
    rows = []
    for m in ("natural", "sdm", "random_defense"):
        for a in ("none", "sna", "pgd", "random"):
            for snr in (0.0, 10.0, 20.0):
                rows.append(_row(m, a, snr, round(0.5 + snr / 50 - 0.1 * (a != "none"), 4)))
    return rows


def test_attack_success_examples():
    assert abs(compute_attack_success(_row(acc=0.98), _row(attack="sna", acc=0.58)) - 0.40) < 1e-12
    assert compute_attack_success(_row(), _row()) == 0
    with pytest.warns(UserWarning):
        assert compute_attack_success(_row(acc=0.5), _row(attack="sna", acc=0.52)) == pytest.approx(-0.02)
    for bad in (_row(model="sdm"), _row(snr=0.0), _row(seed=1)):
        with pytest.raises(ContractError):
            compute_attack_success(_row(), bad)


def test_row_accuracy_range():
    with pytest.raises(ContractError):
        _row(acc=1.2)


def test_csv_round_trip(tmp_path):
    table = _table()
    path = write_results(table, tmp_path / "r.csv", {"config_digest": "abc", "seed": 0})
    assert sorted(read_results(path)) == sorted(table)
    assert read_provenance(path) == {"config_digest": "abc", "seed": "0"}


def test_csv_empty_and_duplicates(tmp_path):
    path = write_results([], tmp_path / "empty.csv")
    assert path.read_text().strip() == "model_tag,attack_tag,snr_db,epsilon,accuracy,n_samples,seed"
    assert read_results(path) == []
    with pytest.raises(ContractError):
        write_results([_row(), _row(acc=0.5)], tmp_path / "dup.csv")


def test_csv_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        write_results(_table(), blocker / "r.csv")


def test_curve_inventories_and_plots(tmp_path):
    table = _table()
    assert curve_inventory(table, "benign") == ["natural", "random_defense", "sdm"]
    assert curve_inventory(table, "adversarial") == sorted(
        f"{a} vs {m}" for a in ("sna", "pgd", "random") for m in ("natural", "sdm", "random_defense"))
    a = plot_curves(table, "adversarial", tmp_path / "a.png", {"seed": 0})
    b = plot_curves(table, "adversarial", tmp_path / "b.png", {"seed": 0})
    assert hashlib.sha256(a.read_bytes()).digest() == hashlib.sha256(b.read_bytes()).digest()
    assert plot_curves([_row()], "benign", tmp_path / "one.png").stat().st_size > 0
    with pytest.raises(ContractError):
        plot_curves([_row()], "adversarial", tmp_path / "none.png")
    with pytest.raises(ContractError):
        plot_curves(table, "everything", tmp_path / "x.png")


def test_spearman_trend():
    assert spearman_trend({0.0: 0.5, 10.0: 0.7, 20.0: 0.9}) == pytest.approx(1.0)
    assert spearman_trend({0.0: 0.9, 10.0: 0.9}) == 0.0


@pytest.fixture(scope="module")
def sweep_inputs(small_split):
    return small_split.X_test[:32], small_split.y_test[:32]


def _sweep_cfg(eps=0.5, attacks=("none", "sna", "random")):
    budget = AttackBudget(epsilon=eps, max_iterations=3, queries_per_iteration=6)
    return SweepConfig(snr_grid=(0.0, 10.0), budget=budget, attacks=attacks, seed=0)


def test_sweep_none_rows_are_natural_accuracy(trained_small, sweep_inputs):
    from semcom_sna.evaluation import channel_seed
    from semcom_sna.semcom import classify_accuracy

    X, y = sweep_inputs
    table = run_snr_sweep(_sweep_cfg(attacks=("none",)), [trained_small], X, y)
    for snr, acc in lookup(table, "natural", "none").items():
        assert acc == classify_accuracy(trained_small, X, y, snr, channel_seed(0, snr))


def test_sweep_epsilon_zero_equals_none(trained_small, sweep_inputs):
    X, y = sweep_inputs
    table = run_snr_sweep(_sweep_cfg(eps=0.0), {"natural": trained_small}, X, y)
    assert lookup(table, "natural", "sna") == lookup(table, "natural", "none")
    assert lookup(table, "natural", "random") == lookup(table, "natural", "none")


def test_sweep_deterministic(trained_small, sweep_inputs, tmp_path):
    X, y = sweep_inputs
    a = write_results(run_snr_sweep(_sweep_cfg(), [trained_small], X, y), tmp_path / "a.csv")
    b = write_results(run_snr_sweep(_sweep_cfg(), [trained_small], X, y), tmp_path / "b.csv")
    assert a.read_bytes() == b.read_bytes()


def test_sweep_reuses_batches(trained_small, sweep_inputs):
    X, y = sweep_inputs
    batches = {}
    run_snr_sweep(_sweep_cfg(), [trained_small], X, y, batches)
    assert set(batches) == {("natural", "sna"), ("natural", "random")}
    assert batches[("natural", "sna")].model_tag == "natural"
    skipped = run_snr_sweep(_sweep_cfg(attacks=("none", "pgd")), [trained_small], X, y, {}, generate_missing=False)
    assert {r.attack_tag for r in skipped} == {"none"}


def test_sweep_mismatches(trained_small, sweep_inputs):
    X, y = sweep_inputs
    with pytest.raises(ConfigurationError):
        run_snr_sweep(_sweep_cfg(), [trained_small], np.zeros((4, 3, 8, 8), np.float32), y[:4])
    with pytest.raises(ConfigurationError):
        run_snr_sweep(dataclasses.replace(_sweep_cfg(), metric="plate_recognition"), [trained_small], X, y)
    with pytest.raises(ContractError):
        SweepConfig(snr_grid=(), budget=AttackBudget())
    with pytest.raises(ContractError):
        SweepConfig(snr_grid=(0.0,), budget=AttackBudget(), attacks=("fgsm",))
