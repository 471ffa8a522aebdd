import math

import numpy as np
import pytest

from cada import numerics as nx
from cada.data import make_batch
from cada.errors import BatchError, ConfigError, ValidationError
from cada.losses import (
    LossSwitches,
    ara_loss,
    atp_loss,
    binary_match_loss,
    cada_step_losses,
    group_count,
    group_features,
    group_windows,
    masked_token_loss,
    ndf_loss,
    select_hard_negatives,
    similarity_matrix,
    target_distribution,
    total_loss,
)
from cada.model import MATCH, MISMATCH


def ndf_reference(sim, identities, tau=0.02, eps=1e-8, backward=True):
    """Row-by-row float64 loop over both retrieval directions."""
    sim = np.asarray(sim, dtype=np.float64)
    n = len(identities)
    total = 0.0
    for matrix in (sim, sim.T):
        for i in range(n):
            logits = matrix[i] / tau
            p = np.exp(logits - logits.max())
            p /= p.sum()
            q = np.array([float(identities[i] == identities[j]) for j in range(n)])
            q /= q.sum()
            row = sum(p[j] * math.log((p[j] + eps) / (q[j] + eps)) for j in range(n))
            if backward:
                row += sum(q[j] * math.log((q[j] + eps) / (p[j] + eps)) for j in range(n))
            total += row / n
    return total


def log_softmax_np(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


@pytest.fixture
def batch(corpus):
    rng = np.random.default_rng(4)
    return make_batch(corpus.split("train"), 4, rng, 1.0, corpus.lexicon, corpus.vocab, max_len=16)


def test_single_pair_ndf_is_zero():
    assert ndf_loss(nx.Tensor([[0.7]]), [0]).item() == pytest.approx(0.0, abs=1e-6)


def test_ndf_two_pairs():
    sim = np.array([[0.9, 0.1], [0.2, 0.6]])
    got = ndf_loss(nx.Tensor(sim), [0, 1]).item()
    assert got == pytest.approx(ndf_reference(sim, [0, 1]), rel=1e-4)


def test_ndf_matches_loop_with_shared_identity(rng):
    sim = rng.uniform(-1, 1, size=(4, 4))
    identities = [3, 3, 5, 8]
    for tau in (0.02, 0.5):
        got = ndf_loss(nx.Tensor(sim), identities, tau=tau).item()
        assert got == pytest.approx(ndf_reference(sim, identities, tau), rel=1e-4)


def test_forward_kl_mode(rng):
    sim = rng.uniform(-1, 1, size=(3, 3))
    got = ndf_loss(nx.Tensor(sim), [0, 1, 2], tau=0.1, mode="forward_kl").item()
    assert got == pytest.approx(ndf_reference(sim, [0, 1, 2], 0.1, backward=False), rel=1e-4)


def test_ndf_ignores_projection_scale(rng):
    image = rng.normal(size=(4, 6))
    text = rng.normal(size=(4, 6))
    identities = [0, 0, 1, 2]
    base = ndf_loss(similarity_matrix(nx.Tensor(image), nx.Tensor(text)), identities, tau=0.1).item()
    scaled = ndf_loss(similarity_matrix(nx.Tensor(3.0 * image), nx.Tensor(0.25 * text)), identities, tau=0.1).item()
    assert scaled == pytest.approx(base, rel=1e-4)
    negatives = select_hard_negatives(similarity_matrix(nx.Tensor(image), nx.Tensor(text)).data, identities)
    rescaled = select_hard_negatives(similarity_matrix(nx.Tensor(5.0 * image), nx.Tensor(text)).data, identities)
    assert all(np.array_equal(a, b) for a, b in zip(negatives, rescaled))


def test_ndf_argument_checks():
    with pytest.raises(ValidationError):
        ndf_loss(nx.Tensor(np.eye(2)), [0, 1], tau=0.0)
    with pytest.raises(ValidationError):
        ndf_loss(nx.Tensor(np.eye(2)), [0, 1], mode="reverse")
    with pytest.raises(BatchError):
        ndf_loss(nx.Tensor(np.eye(2)), [0, 1, 2])


def test_target_distribution_rows_sum_to_one():
    q = target_distribution([1, 1, 2])
    assert np.allclose(q.sum(axis=1), 1.0)
    assert q[0].tolist() == [0.5, 0.5, 0.0]


def test_hard_negatives_lowest_index_on_ties():
    sim = np.array([[0.9, 0.5, 0.5], [0.1, 0.8, 0.3], [0.2, 0.4, 0.7]])
    neg_text, neg_image = select_hard_negatives(sim, [0, 1, 2])
    assert neg_text.tolist() == [1, 2, 1]
    assert neg_image.tolist() == [2, 0, 0]


def test_hard_negatives_skip_same_identity():
    sim = np.array([[0.9, 0.95, 0.1], [0.9, 0.8, 0.2], [0.3, 0.4, 0.7]])
    neg_text, _ = select_hard_negatives(sim, [0, 0, 1])
    assert neg_text.tolist() == [2, 2, 1]


def test_hard_negatives_need_two_identities():
    with pytest.raises(BatchError):
        select_hard_negatives(np.eye(3), [4, 4, 4])


@pytest.mark.parametrize(
    "p, r, kappa",
    [(36, 36, 2), (36, 18, 3), (24, 24, 3), (48, 24, 2), (72, 72, 1)],
)
def test_group_count_table(p, r, kappa):
    assert group_count(72, p, r) == kappa
    assert len(group_windows(72, p, r)) == kappa


def test_group_windows_skip_enc_row():
    assert group_windows(72, 36, 36) == [(1, 37), (37, 72)]


def test_group_bounds():
    with pytest.raises(ConfigError):
        group_count(16, 20, 4)
    with pytest.raises(ConfigError):
        group_count(16, 4, 0)


def test_group_features_are_window_means():
    fused = np.arange(10, dtype=np.float64).reshape(1, 5, 2)
    groups = group_features(nx.Tensor(fused), 2, 2)
    assert groups.kappa == 2
    assert np.allclose(groups.features.data[0], [[0, 1], [3, 4], [7, 8]])


def test_binary_match_loss_uniform():
    half = np.full((2, 3, 2), math.log(0.5))
    assert binary_match_loss(half, half, half).item() == pytest.approx(3 * math.log(2), rel=1e-6)


def test_masked_token_loss_uniform():
    logp = nx.Tensor(np.full((5, 200), -math.log(200)))
    loss = masked_token_loss(logp, [7, 8, 9, 10, 11], [0, 0, 1, 1, 1])
    assert loss.item() == pytest.approx(math.log(200), rel=1e-6)


def test_masked_token_loss_averages_per_pair():
    logp = np.zeros((4, 3))
    logp[0, 1] = -1.0
    logp[1:, 2] = -2.0
    loss = masked_token_loss(nx.Tensor(logp), [1, 2, 2, 2], [0, 1, 1, 1])
    assert loss.item() == pytest.approx(1.5)


def test_ara_skipped_without_masks(tiny_model, batch):
    image_tokens = tiny_model.encode_image(batch.images)
    empty = [np.zeros(0, dtype=np.int64)] * batch.size
    result = ara_loss(tiny_model, image_tokens, batch.enc_ids, batch.pad_mask, empty, empty)
    assert result.skipped
    assert result.loss.item() == 0.0
    assert tiny_model.decoder_calls == 0


def test_total_loss_identity():
    total, breakdown = total_loss(5.0, 1.0, 2.0, lam=0.0)
    assert total.item() == pytest.approx(3.0)
    assert breakdown == dict(ndf=5.0, atp=1.0, ara=2.0, total=3.0)


def test_atp_matches_pairwise_loop(tiny_model, batch):
    with nx.no_grad():
        image_tokens, image_proj = tiny_model.embed_images(batch.images)
        _, text_proj = tiny_model.embed_texts((batch.cls_ids, batch.pad_mask))
        neg_text, neg_image = select_hard_negatives(nx.cosine_matrix(image_proj, text_proj), batch.identities)
        got = atp_loss(tiny_model, image_tokens, batch.enc_ids, batch.pad_mask, neg_text, neg_image, 4, 4).item()

        weight = tiny_model.match_head.weight.data.astype(np.float64)
        bias = tiny_model.match_head.bias.data.astype(np.float64)
        windows = group_windows(16, 4, 4)
        n = batch.size
        total = 0.0
        for a in range(n):
            for image, text, target in ((a, a, MATCH), (a, neg_text[a], MISMATCH), (neg_image[a], a, MISMATCH)):
                fused = tiny_model.decode(
                    (batch.enc_ids[text : text + 1], batch.pad_mask[text : text + 1]),
                    image_tokens[image : image + 1],
                ).data[0].astype(np.float64)
                groups = np.stack([fused[0]] + [fused[s:e].mean(axis=0) for s, e in windows])
                total -= log_softmax_np(groups @ weight.T + bias)[:, target].sum()
    assert got == pytest.approx(total / (n * (len(windows) + 1)), rel=1e-5)


def test_ara_matches_pairwise_loop(tiny_model, batch):
    with nx.no_grad():
        image_tokens = tiny_model.encode_image(batch.images)
        result = ara_loss(
            tiny_model, image_tokens, batch.masked_ids, batch.pad_mask, batch.mask_positions, batch.mask_labels
        )
        weight = tiny_model.mam_head.weight.data.astype(np.float64)
        bias = tiny_model.mam_head.bias.data.astype(np.float64)
        per_pair = []
        for i, positions in enumerate(batch.mask_positions):
            if not len(positions):
                continue
            fused = tiny_model.decode(
                (batch.masked_ids[i : i + 1], batch.pad_mask[i : i + 1]), image_tokens[i : i + 1]
            ).data[0].astype(np.float64)
            logp = log_softmax_np(fused[positions] @ weight.T + bias)
            per_pair.append(-logp[np.arange(len(positions)), batch.mask_labels[i]].mean())
    assert result.n_pairs == len(per_pair) > 0
    assert result.n_masked == batch.n_masked
    assert result.loss.item() == pytest.approx(np.mean(per_pair), rel=1e-5)


def test_step_losses_switches(tiny_model, batch):
    off = LossSwitches(use_atp=False, use_ara=False, group_size=4, group_stride=4)
    step = cada_step_losses(tiny_model, batch, off)
    assert step.breakdown["atp"] == 0.0
    assert step.breakdown["ara"] == 0.0
    assert step.ara_skipped
    assert step.breakdown["total"] == pytest.approx(off.lam * step.breakdown["ndf"])
    assert tiny_model.decoder_calls == 0

    on = LossSwitches(group_size=4, group_stride=4)
    step = cada_step_losses(tiny_model, batch, on)
    b = step.breakdown
    assert b["total"] == pytest.approx(on.lam * b["ndf"] + b["atp"] + b["ara"])
    assert step.total.item() == pytest.approx(b["total"], rel=1e-5)
    # 3 N_z rows for ATP plus one row per pair with a mask for ARA.
    assert tiny_model.decoder_calls == 3 * batch.size + sum(1 for p in batch.mask_positions if len(p))


@pytest.mark.parametrize(
    "terms",
    [("use_ndf",), ("use_atp",), ("use_ara",), ("use_ndf", "use_atp", "use_ara")],
    ids=["ndf", "atp", "ara", "total"],
)
def test_step_losses_gradient(tiny_model, corpus, terms):
    rng = np.random.default_rng(2)
    pair = make_batch(corpus.split("train"), 2, rng, 1.0, corpus.lexicon, corpus.vocab, max_len=16)
    assert len(set(pair.identities.tolist())) == 2
    switches = LossSwitches(tau=0.1, group_size=4, group_stride=4)
    for name in ("use_ndf", "use_atp", "use_ara"):
        setattr(switches, name, name in terms)
    report = nx.finite_diff_check(
        lambda: cada_step_losses(tiny_model, pair, switches).total, tiny_model, h=1e-4, samples=4
    )
    assert report.passed, sorted(report.per_parameter.items(), key=lambda kv: -kv[1])[:5]
