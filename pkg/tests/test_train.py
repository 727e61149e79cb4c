import hashlib
import math
import zipfile

import numpy as np
import pytest
import torch

from vq_sign.corpus import default_schema, generate_corpus
from vq_sign.model import ModelConfig, Variant, build_model
from vq_sign.train import (CHECKPOINT_VERSION, NonFiniteLossError, TrainConfig, load_checkpoint,
                           read_checkpoint_meta, save_checkpoint, train)

TINY = ModelConfig(model_dim=16, layers=1, heads=2, dropout=0.1)


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(default_schema(), n_signs=16, instances_per_sign=3, seed=2)


def quick(**kw):
    base = dict(steps=6, batch_size=8, learning_rate=1e-3, reinit_interval=3)
    return TrainConfig(**{**base, **kw})


def digest(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(steps=10, reinit_interval=100)
    TrainConfig(steps=10, reinit_interval=100, reinit=False)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(p_force=1.5)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"steps": 1, "bogus": 2})
    cfg = TrainConfig()
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    assert (cfg.learning_rate, cfg.beta, cfg.gamma, cfg.reinit_interval) == (8.61e-5, 3e-6, 3.0, 1000)


def test_schedule_reaches_end_at_gumbel_horizon():
    cfg = TrainConfig(steps=2000)
    sched = cfg.schedule()
    assert sched.temperature(0) == 1.0
    assert math.isclose(sched.temperature(1000), 0.1, rel_tol=1e-9)


def test_zero_steps_is_noop(corpus):
    recs, split = corpus
    model = build_model(Variant.BASELINE, cfg=TINY)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    _, history, state = train(model, recs, split, TrainConfig(steps=0))
    assert history == [] and state.step == 0
    assert all(torch.equal(before[k], v) for k, v in model.state_dict().items())


def test_log_contents_and_reinit(corpus):
    recs, split = corpus
    model = build_model(Variant.FULL, cfg=TINY)
    seen = []
    _, history, state = train(model, recs, split, quick(), log=seen.append)
    assert seen == history and [e["step"] for e in history] == list(range(6))
    assert state.step == 6
    first = history[0]
    assert {"loss", "recon/RH", "codebook/hand", "commit/hand", "diversity/hand", "perplexity/hand"} <= set(first)
    assert "temperature" in first and "temperature" not in history[-1]
    assert "reinit/hand" in history[2] and "reinit/hand" not in history[1]
    total = sum(v for k, v in first.items() if "/" in k and k.split("/")[0] in ("recon", "codebook", "commit", "diversity"))
    assert math.isclose(first["loss"], total, rel_tol=1e-5)


def test_same_seed_identical_checkpoints(tmp_path, corpus):
    recs, split = corpus
    paths = []
    for i in range(2):
        model = build_model(Variant.FULL, cfg=TINY, seed=4)
        _, _, state = train(model, recs, split, quick(seed=4))
        p = tmp_path / f"run{i}.zip"
        save_checkpoint(p, model, state, quick(seed=4))
        paths.append(p)
    assert digest(paths[0]) == digest(paths[1])


def test_different_seed_differs(tmp_path, corpus):
    recs, split = corpus
    outs = []
    for seed in (0, 1):
        model = build_model(Variant.BASELINE, cfg=TINY, seed=0)
        train(model, recs, split, quick(seed=seed))
        outs.append(model.codebooks["all"].weight.detach().clone())
    assert not torch.equal(*outs)


def test_checkpoint_roundtrip(tmp_path, corpus):
    recs, split = corpus
    model = build_model(Variant.PSS, cfg=TINY, seed=1)
    _, _, state = train(model, recs, split, quick())
    path = tmp_path / "m.zip"
    save_checkpoint(path, model, state, quick(), {"seed": 1})
    meta = read_checkpoint_meta(path)
    assert meta["checkpoint_version"] == CHECKPOINT_VERSION and meta["variant"] == "pss" and meta["step"] == 6
    assert meta["seed"] == 1 and meta["reserved"]["all"]
    loaded, meta2, state2 = load_checkpoint(path)
    assert meta2 == meta and state2.step == 6
    for (k, a), (_, b) in zip(model.state_dict().items(), loaded.state_dict().items()):
        assert torch.equal(a, b), k
    assert loaded.codebooks["all"].reserved == model.codebooks["all"].reserved
    batch = model.eval().batch(recs[:3])
    assert torch.equal(model.codes(batch), loaded.codes(batch))
    with zipfile.ZipFile(path) as zf:
        assert all(i.date_time == (1980, 1, 1, 0, 0, 0) for i in zf.infolist())


def test_checkpoint_version_check(tmp_path, corpus):
    model = build_model(Variant.BASELINE, cfg=TINY)
    path = tmp_path / "m.zip"
    save_checkpoint(path, model, extra={"checkpoint_version": 99})
    with pytest.raises(ValueError, match="checkpoint_version"):
        load_checkpoint(path)


def test_resume_continues_numbering(tmp_path, corpus):
    recs, split = corpus
    model = build_model(Variant.BASELINE, cfg=TINY)
    _, _, state = train(model, recs, split, quick())
    path = tmp_path / "m.zip"
    save_checkpoint(path, model, state, quick())
    model2, _, state2 = load_checkpoint(path)
    assert state2.optimizer is not None
    _, history, state3 = train(model2, recs, split, quick(), state=state2)
    assert [e["step"] for e in history] == list(range(6, 12)) and state3.step == 12


def test_non_finite_loss_names_term(corpus):
    recs, split = corpus
    model = build_model(Variant.BASELINE, cfg=TINY)
    with torch.no_grad():
        model.codebooks["all"].weight.fill_(float("nan"))
    with pytest.raises(NonFiniteLossError) as exc:
        train(model, recs, split, quick(gumbel=False))
    assert exc.value.step == 0
    assert exc.value.term in ("total", "codebook/all", "commit/all", "diversity/all", "recon/ALL")
    assert exc.value.term in str(exc.value)


def test_reconstruction_improves(corpus):
    recs, split = corpus
    model = build_model(Variant.BASELINE, cfg=ModelConfig(model_dim=32, layers=1, heads=2, dropout=0.0), seed=0)
    _, history, _ = train(model, recs, split, TrainConfig(steps=120, batch_size=16, learning_rate=2e-3,
                                                          reinit_interval=40))
    recon = np.array([e["recon/ALL"] for e in history])
    assert np.median(recon[-12:]) < np.median(recon[:12])


def test_train_needs_training_records(corpus):
    recs, split = corpus
    from vq_sign.corpus import SplitSpec
    with pytest.raises(ValueError):
        train(build_model(Variant.BASELINE, cfg=TINY), recs, SplitSpec(test=split.train), quick())
