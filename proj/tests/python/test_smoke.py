import itertools
import json
import math
import random

import pytest

import ibprune


def tiny_config():
    cfg = ibprune.default_config()
    cfg["model"].update(num_layers=2, hidden_dim=16, num_heads=4, ffn_dim=32, vocab_size=24, max_seq_len=16,
                        num_labels=2)
    cfg["dataset"]["synthetic"].update(vocab_size=24, num_classes=2, min_length=6, max_length=12)
    cfg["dataset"]["split_sizes"] = {"train": 64, "validation": 16, "test": 16}
    cfg["distill"]["layer_map"] = [[0, 0], [1, 1]]
    cfg["optimizer"]["batch_size"] = 16
    cfg["schedule"].update(teacher_epochs=1, stage1_min_steps=10, stage1_max_steps=20, eval_every=10,
                           stage2_warmup_max_epochs=1, stage2_epochs=1)
    return ibprune.normalize_config(cfg)


def test_default_seed_and_unknown_key():
    assert ibprune.default_config()["seed"] == 42
    with pytest.raises(ValueError):
        ibprune.normalize_config({"modle": {}})


def test_synthetic_label_rule_and_balance():
    spec = {"vocab_size": 64, "num_classes": 4, "min_length": 12, "max_length": 24, "num_signal": 2,
            "signal_ids_per_class": 2}
    data = ibprune.synth_generate(spec, 2000, seed=3)
    counts = [0] * 4
    for ids, label in data:
        assert ids[0] == 0
        assert ibprune.synth_label(spec, ids) == label
        counts[label] += 1
    assert max(abs(c / 2000 - 0.25) for c in counts) <= 0.01


def test_entropy_matches_enumeration():
    rng = random.Random(5)
    for length in range(1, 8):
        pi = [rng.random() for _ in range(length)]
        total = 0.0
        for z in itertools.product([0, 1], repeat=length):
            p = math.prod(q if b else 1 - q for q, b in zip(pi, z))
            if p > 0:
                total += p * math.log(p)
        assert abs(ibprune.entropy_loss([pi], normalize=False) - total) < 1e-12


def test_hard_concrete_and_padding_table():
    expected = 1 / (1 + math.exp(-(0 - (2 / 3) * math.log(0.1 / 1.1))))
    assert abs(ibprune.hc_open_probability(0.0) - expected) < 1e-15
    assert ibprune.fixed_lengths() == {"MRPC": 128, "MNLI": 128, "QNLI": 128, "SST2": 64}


def test_pipeline_roundtrip(tmp_path):
    cfg = tiny_config()
    train, validation, test = ibprune.load_dataset(cfg)
    teacher, csv = ibprune.finetune_teacher(cfg, train, validation)
    assert csv.startswith("step,stage,")
    assert teacher.stage == "teacher" and not teacher.has_masks

    dense = ibprune.evaluate(teacher, test)
    assert dense["flops"]["speedup"] == 1.0

    path = tmp_path / "teacher.ckpt"
    teacher.save(str(path))
    loaded = ibprune.Checkpoint.load(str(path))
    assert loaded.to_bytes() == teacher.to_bytes()
    with pytest.raises(ValueError):
        ibprune.Checkpoint.from_bytes(teacher.to_bytes()[:-3])

    s1, _, _, _ = ibprune.stage1(cfg, train, validation, teacher)
    assert s1.has_masks
    assert s1.prunable_parameters <= teacher.prunable_parameters

    cfg["loss_weights"]["gamma2"] = 0.5
    s2, _ = ibprune.stage2(cfg, train, validation, s1)
    assert s2.has_samplers
    a1, a2 = json.loads(s1.architecture_json), json.loads(s2.architecture_json)
    a1.pop("sampler_dim"), a2.pop("sampler_dim")
    assert a1 == a2
    result = ibprune.evaluate(s2, test)
    report = ibprune.model_flops(s2, result["traces"])
    assert report["speedup"] == result["flops"]["speedup"]
