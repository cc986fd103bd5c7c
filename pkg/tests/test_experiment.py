import json

import numpy as np
import pytest

from ehtune.backbone import BackboneConfig, build_backbone
from ehtune.errors import CheckpointError, ConfigError
from ehtune.experiment import (
    DEFAULT_STEPS,
    ExperimentConfig,
    atomic_write,
    checkpoint_text,
    decode_array,
    encode_array,
    load_backbone,
    load_config,
    read_checkpoint,
    save_checkpoint,
)
from ehtune.optim import OptimConfig
from ehtune.tasks import TASK_NAMES
from helpers import SMALL


def test_defaults():
    cfg = ExperimentConfig()
    assert cfg.seeds == (0, 1, 2, 3)
    assert cfg.stage1_fraction == 0.1
    assert set(DEFAULT_STEPS) == set(TASK_NAMES)
    assert cfg.stage2_optim.weight_decay == 0.1 and cfg.stage2_optim.warmup_fraction == 0.1


def test_round_trip_through_json():
    cfg = ExperimentConfig(tasks=["pattern-parity"], seeds=[5], stage1_optim=OptimConfig(lr_peak=1e-3))
    back = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back == cfg


@pytest.mark.parametrize(
    "raw",
    [
        {"colour": 1},
        {"pet": {"rank": 2}},
        {"pretrain": {"optim": {"lr": 1}}},
        {"tasks": ["glue"]},
        {"strategies": ["mixout"]},
        {"total_steps": {"nope": 3}},
        {"seeds": []},
        {"stage1_fraction": 1.5},
        {"backbone": {"d_model": 10, "n_heads": 4}},
        {"backbone": 3},
    ],
)
def test_invalid_configs_rejected(raw):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(raw)


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "x.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{nope")
    with pytest.raises(ConfigError, match="bad.json"):
        load_config(bad)


def test_plan_uses_task_budget():
    cfg = ExperimentConfig(total_steps={"topic-pair": 40})
    p = cfg.plan("eh-ft-bitfit", "topic-pair", seed=3)
    assert p.total_steps == 40 and p.seed == 3
    assert cfg.plan("ft", "pattern-parity").total_steps == DEFAULT_STEPS["pattern-parity"]


def test_atomic_write_replaces(tmp_path):
    path = tmp_path / "sub" / "f.txt"
    atomic_write(path, "one")
    atomic_write(path, "two")
    assert path.read_text() == "two"
    assert [p.name for p in path.parent.iterdir()] == ["f.txt"]


def test_array_codec_is_bitwise():
    a = np.random.default_rng(0).normal(size=(3, 5)).astype(np.float32)
    assert np.array_equal(decode_array(encode_array(a)), a)
    with pytest.raises(CheckpointError):
        decode_array({"shape": [4], "data": encode_array(a)["data"]})
    with pytest.raises(CheckpointError):
        decode_array({"shape": [1]})


def test_checkpoint_round_trip(tmp_path):
    bb = build_backbone(SMALL, 1)
    path = tmp_path / "c.json"
    save_checkpoint(path, bb.params.snapshot(), {"note": "x"})
    params, cfg = read_checkpoint(path)
    assert cfg == {"note": "x"}
    loaded = load_backbone(path, SMALL)
    assert all(np.array_equal(loaded.params[n].data, bb.params[n].data) for n in params)
    assert checkpoint_text(params, cfg) == path.read_text()


def test_checkpoint_errors(tmp_path):
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "none.json")
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"format_version": 99, "params": {}}))
    with pytest.raises(CheckpointError, match="format"):
        read_checkpoint(path)
    snap = dict(build_backbone(SMALL, 0).params.snapshot())
    del snap["mlm.out.bias"]
    save_checkpoint(path, snap)
    with pytest.raises(CheckpointError, match="mlm.out.bias"):
        load_backbone(path, SMALL)
    with pytest.raises(CheckpointError, match="embed.token.weight"):
        load_backbone(path, BackboneConfig(d_model=16, n_heads=2, n_layers=2, d_ff=32, vocab_size=32))
