import csv
import hashlib
import io
import logging

import numpy as np
import pytest
import torch

from vq_sign.corpus import default_schema, generate_corpus
from vq_sign.evaluate import (CSV_COLUMNS, MetricsReport, ProbeConfig, ProbeKind, append_csv_row, code_perplexities,
                              eval_reconstruction, evaluate_model, extract_codes, ranks_of_true, run_isr_protocol,
                              run_oov_isr_protocol, score_ranking, support_eval_split, train_probe)
from vq_sign.model import ConfigError, ModelConfig, Variant, build_model
from vq_sign.pose import StreamId

TINY = ModelConfig(model_dim=16, layers=1, heads=2, dropout=0.0)


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(default_schema(), n_signs=40, instances_per_sign=4, seed=8)


@pytest.fixture(scope="module")
def full_model():
    return build_model(Variant.FULL, cfg=TINY, seed=2).eval()


def test_score_ranking_hand_cases():
    scores = np.array([[0.9, 0.1, 0.0, 0.0],
                       [0.5, 0.4, 0.0, 0.1],
                       [0.4, 0.3, 0.2, 0.1]])
    mrr, r10 = score_ranking(scores, None, np.array([0, 1, 3]))
    assert mrr == pytest.approx((1 + 0.5 + 0.25) / 3)
    assert mrr == pytest.approx(0.5833, abs=1e-4)
    assert r10 == 100.0
    perfect = np.eye(12)
    assert score_ranking(perfect, None, np.arange(12)) == (1.0, 100.0)


def test_ties_go_to_lower_index():
    scores = np.zeros((2, 5))
    assert ranks_of_true(scores, np.array([0, 3])).tolist() == [1, 4]


def test_random_scorer_recall():
    rng = np.random.default_rng(0)
    scores = rng.normal(size=(10_000, 100))
    targets = rng.integers(0, 100, size=10_000)
    _, r10 = score_ranking(scores, None, targets)
    assert abs(r10 - 10.0) <= 1.0


def test_ranking_invariant_to_monotone_transform():
    rng = np.random.default_rng(1)
    scores = rng.normal(size=(300, 30))
    targets = rng.integers(0, 30, size=300)
    a = score_ranking(scores, None, targets)
    b = score_ranking(np.exp(3 * scores) + 7, None, targets)
    assert a == b


def test_multi_head_ranking_is_unweighted_mean():
    s1 = np.eye(3)
    s2 = np.array([[0.0, 1.0], [1.0, 0.0], [1.0, 0.0]])
    targets = np.array([[0, 0], [1, 1], [2, 0]])
    mrr, r10 = score_ranking([s1, s2], None, targets)
    assert mrr == pytest.approx((1.0 + (0.5 + 0.5 + 1.0) / 3) / 2)
    with pytest.raises(ValueError):
        score_ranking([s1], None, targets)


def test_probe_separable_toy():
    rng = np.random.default_rng(2)
    centres = rng.normal(scale=5, size=(4, 10))
    y = np.repeat(np.arange(4), 25)
    X = centres[y] + rng.normal(scale=0.1, size=(100, 10))
    probe = train_probe(X, y, ProbeConfig(epochs=30), seed=0)
    pred = probe.scores(X)[0].argmax(1)
    assert np.mean(pred == y) == 1.0


def test_probe_heads_and_determinism():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(60, 12))
    Y = np.stack([np.arange(60) % c for c in [2, 3, 5] * 5 + [4]], axis=1)
    cfg = ProbeConfig(kind=ProbeKind.PFR, epochs=2)
    a = train_probe(X, Y, cfg, seed=7)
    b = train_probe(X, Y, cfg, seed=7)
    assert len(a.heads) == 16
    for (k, x), (_, y) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(x, y), k


def test_probe_missing_class():
    X = np.zeros((4, 3))
    with pytest.raises(ConfigError):
        train_probe(X, np.array([0, 0, 2, 2]), ProbeConfig(epochs=1), class_counts=[3])
    with pytest.raises(ConfigError):
        train_probe(X, np.zeros(4, dtype=int), ProbeConfig(epochs=1))


def test_probe_config_validation():
    with pytest.raises(ValueError):
        ProbeConfig(support_fraction=1.0)
    assert ProbeConfig().hidden == 256 and ProbeConfig().layers == 2


def test_support_eval_split(caplog):
    gloss = np.array([0, 0, 0, 0, 1, 1, 2])
    with caplog.at_level(logging.WARNING):
        sup, ev = support_eval_split(gloss, 0.5, seed=0)
    assert "single instance" in caplog.text
    assert len(set(sup) & set(ev)) == 0
    assert sorted(np.concatenate([sup, ev]).tolist()) == [0, 1, 2, 3, 4, 5]
    for g in (0, 1):
        assert np.sum(gloss[sup] == g) >= 1 and np.sum(gloss[ev] == g) >= 1


def test_isr_requires_two_glosses():
    with pytest.raises(ConfigError):
        run_isr_protocol(np.zeros((4, 3)), np.array([5, 5, 5, 5]), ProbeConfig(epochs=1))


def test_reconstruction_perfect_is_zero(full_model, corpus, monkeypatch):
    recs, _ = corpus

    def echo(self, z, out_frames, lengths=None):
        return self._target

    report = eval_reconstruction(full_model, recs[:2])
    assert report.overall > 0
    batch = full_model.batch(recs[:2], with_labels=False)
    for s in full_model.streams:
        full_model.decoders[s.value]._target = batch.x[s]
    monkeypatch.setattr(type(full_model.decoders["RH"]), "forward", echo)
    zero = eval_reconstruction(full_model, recs[:2])
    assert zero.overall == 0.0 and all(v == 0.0 for v in zero.per_stream.values())


def test_reconstruction_weighted_mean(full_model, corpus):
    recs, _ = corpus
    rep = eval_reconstruction(full_model, recs[:9], batch_size=4)
    assert set(rep.per_stream) == set(full_model.streams)
    recomputed = sum(rep.sums.values()) / sum(rep.counts.values())
    assert abs(rep.overall - recomputed) < 1e-9
    weighted = sum(rep.per_stream[s] * rep.counts[s] for s in rep.counts) / sum(rep.counts.values())
    assert abs(rep.overall - weighted) < 1e-9
    # batching does not change the result beyond float summation order
    assert abs(eval_reconstruction(full_model, recs[:9], batch_size=9).overall - rep.overall) < 1e-6


def test_single_stream_reports_overall_only(corpus):
    recs, _ = corpus
    m = build_model(Variant.BASELINE, cfg=TINY).eval()
    rep = eval_reconstruction(m, recs[:3])
    assert rep.per_stream == {} and rep.overall > 0
    with pytest.raises(ValueError):
        eval_reconstruction(m, [])


def test_extract_codes_contract(corpus):
    recs, _ = corpus
    for v in Variant:
        m = build_model(v, cfg=TINY, seed=0).eval()
        F = extract_codes(m, recs[:5])
        assert F.shape == (5, 960)
        again = extract_codes(m, [recs[0], recs[0]])
        assert np.array_equal(again[0], again[1]) and np.array_equal(again[0], F[0])
        offset = 0
        for s in m.streams:
            book = m.book_for(s).weight.detach().numpy()
            for _ in range(m.plan.latent_counts[s]):
                seg = F[:, offset:offset + 32]
                assert all((book == row).all(1).any() for row in seg)
                offset += 32


def test_extract_codes_label_free(corpus):
    recs, _ = corpus
    m = build_model(Variant.PSS, cfg=TINY).eval()
    from dataclasses import replace
    stripped = [replace(r, labels={k: 0 for k in r.labels}) for r in recs[:4]]
    assert np.array_equal(extract_codes(m, recs[:4]), extract_codes(m, stripped))


def test_code_perplexities(full_model, corpus):
    recs, _ = corpus
    ppl = code_perplexities(full_model, recs[:10])
    assert set(ppl) == {"hand", "move", "nmm", "body"}
    assert all(1.0 <= ppl[n] <= full_model.codebooks[n].size for n in ppl)


def test_oov_protocol_and_leak(full_model, corpus):
    recs, split = corpus
    test = [r for r in recs if r.gloss_id in split.test | split.validation]
    cfg = ProbeConfig(epochs=15)
    honest = run_oov_isr_protocol(full_model, test, cfg, seed=0)
    leaky = run_oov_isr_protocol(full_model, test, cfg, seed=0, leak=True)
    assert 0 < honest[0] <= 1 and 0 <= honest[1] <= 100
    assert leaky[0] > honest[0]


def test_probes_leave_model_untouched(full_model, corpus):
    recs, split = corpus
    before = hashlib.sha256(b"".join(v.numpy().tobytes() for v in full_model.state_dict().values())).hexdigest()
    evaluate_model(full_model, recs, split, ProbeConfig(epochs=1), seed=0)
    after = hashlib.sha256(b"".join(v.numpy().tobytes() for v in full_model.state_dict().values())).hexdigest()
    assert before == after


def test_report_and_csv(tmp_path, full_model, corpus):
    recs, split = corpus
    report = evaluate_model(full_model, recs, split, ProbeConfig(epochs=2), seed=0)
    assert report.mse_train >= 0 and report.mse_test >= 0
    for mrr, r10 in (report.isr_iv, report.isr_oov, report.pfr_iv, report.pfr_oov):
        assert 0 < mrr <= 1 and 0 <= r10 <= 100
    assert set(report.perplexity) == {"hand", "move", "nmm", "body"}
    path = tmp_path / "m.csv"
    append_csv_row(path, report)
    append_csv_row(path, report)
    rows = list(csv.DictReader(io.StringIO(path.read_text())))
    assert tuple(rows[0]) == CSV_COLUMNS and len(rows) == 2 and rows[0] == rows[1]
    assert rows[0]["mse_rh"] != ""


def test_single_stream_csv_blanks():
    report = MetricsReport("baseline", 0, 0.1, 0.2, perplexity={"all": 3.0})
    row = report.csv_row()
    assert all(row[f"mse_{s.value.lower()}"] == "" for s in StreamId if s is not StreamId.ALL)
    assert float(row["perplexity_mean"]) == 3.0
