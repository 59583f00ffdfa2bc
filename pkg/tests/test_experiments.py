import math

import pytest

from ldct import experiments as E
from ldct import training as T
from ldct.errors import ConfigError

TINY = {
    "simulation": {"size": 32},
    "denoiser": {"num_scales": 2, "base_channels": 4, "residual_blocks_per_scale": 1},
    "train": {"epochs": 1, "batch_size": 4},
    "pretrain": {"alpha": 0.0, "epochs": 1, "batch_size": 4},
    "pretrain_task": {"n_textures": 4, "n_val": 2, "size": 32},
    "n_train": 4, "n_val": 2, "n_test": 2,
    "seeds": [0, 1],
}


@pytest.fixture(scope="module")
def lab(tmp_path_factory):
    return E.Lab(E.ExperimentConfig.from_dict(TINY), tmp_path_factory.mktemp("lab"))


def test_config_roundtrip_and_errors():
    cfg = E.ExperimentConfig.from_dict(TINY)
    assert E.ExperimentConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        E.ExperimentConfig.from_dict({"epochs": 3})
    with pytest.raises(ConfigError):
        E.ExperimentConfig.from_dict({**TINY, "init": "imagenet"})
    with pytest.raises(ConfigError):
        E.ExperimentConfig.from_dict({**TINY, "seeds": []})
    assert E.ExperimentConfig().pretrain.alpha == 0.0


def test_splits_are_disjoint_slices(lab):
    s = lab.splits()
    assert [len(s[k]) for k in ("train", "val", "test")] == [4, 2, 2]
    assert not (s["train"].gts[0] == s["test"].gts[0]).all()


def test_runs_are_memoized(lab):
    a = lab.run(0)
    assert lab.run(0) is a
    assert lab.run(0, alpha=5.0) is a  # same as the default
    assert lab.run(1) is not a
    assert lab.run(0, init="scratch") is not a


@pytest.mark.parametrize("name", ["filter", "alpha", "noise_aug", "rotation", "init"])
def test_ablation_tables(lab, name):
    table = E.ablate(lab, name)
    n_variants = {"filter": 2, "alpha": 6, "noise_aug": 3, "rotation": 2, "init": 2}[name]
    assert len(table.variants()) == n_variants
    assert len(table.rows) == n_variants * 2
    summary = table.summary()
    for v in table.variants():
        vals = table.values(v, "psnr")
        assert summary[v]["psnr"][0] == pytest.approx(sum(vals) / len(vals), abs=1e-12)
    csv_lines = table.to_csv().splitlines()
    assert csv_lines[0].split(",")[:2] == ["variant", "seed"] and len(csv_lines) == len(table.rows) + 1
    assert "±" in table.to_table()
    assert len(table.summary_csv().splitlines()) == n_variants + 1


def test_rotation_table_has_defect(lab):
    table = E.ablate(lab, "rotation")
    assert all(r["equivariance_defect"] >= 0 for r in table.rows)


def test_unknown_ablation(lab):
    with pytest.raises(ConfigError):
        E.ablate(lab, "dropout")


def test_wins_counts_per_seed():
    t = E.AblationTable("x", rows=[
        {"variant": "a", "seed": 0, "psnr": 2.0}, {"variant": "b", "seed": 0, "psnr": 1.0},
        {"variant": "a", "seed": 1, "psnr": 1.0}, {"variant": "b", "seed": 1, "psnr": 1.0},
    ], columns=("psnr",))
    assert t.wins("a", "b", "psnr") == 1
    assert t.wins("a", "b", "psnr", ties=True) == 2
    assert t.wins("b", "a", "psnr") == 0


def test_curve_dominance():
    def hist(values):
        return T.TrainHistory([T.EpochRecord(i, 0.0, 0.0, v, 0.0, 0.0) for i, v in enumerate(values)])
    assert E.curve_dominance(hist([0.5, 0.6, 0.7, 0.1]), hist([0.4, 0.6, 0.8, 0.0])) == 0.75
    assert math.isnan(E.curve_dominance(hist([]), hist([0.1])))
