###############################################################################
#
# CADA desk-scale text-to-image person retrieval.
#
# This program is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.
#
###############################################################################
"""
Training objectives.

- ndf_loss: cosine-similarity contrastive loss, forward plus backward KL
  against the identity distribution, in both retrieval directions.
- atp_loss: per-group match/mismatch cross-entropy over decoder outputs of
  the positive pair and its two hard negatives.
- ara_loss: cross-entropy of masked attribute words, averaged per pair.
- total_loss: lambda * ndf + atp + ara.
"""
from dataclasses import dataclass

import numpy as np
from logbook import Logger

from cada import numerics as nx
from cada.errors import BatchError, ConfigError, ValidationError
from cada.model import MATCH, MISMATCH

log = Logger("cada.losses")

NDF_MODES = ("ndf", "forward_kl")


def similarity_matrix(image_proj, text_proj):
    """(N_z, N_z) cosine similarities; entry (i, j) = sim(image i, text j)."""
    return nx.cosine_matrix(image_proj, text_proj)


def target_distribution(identities):
    """Row-normalised same-identity indicator; one-hot when identities are unique."""
    identities = np.asarray(identities)
    same = (identities[:, None] == identities[None, :]).astype(np.float64)
    counts = same.sum(axis=1, keepdims=True)
    return same / counts


def ndf_loss(sim, identities, tau=0.02, eps=1e-8, mode="ndf"):
    """
    Normalised distribution fitting loss over a square similarity matrix.

    For each image row p = softmax(sim / tau) is fitted to the identity
    distribution q with KL(p||q) + KL(q||p); the text columns get the same
    treatment. The two directions are averaged over N_z and summed.
    ``mode="forward_kl"`` keeps only KL(p||q).
    """
    if tau <= 0:
        raise ValidationError(f"temperature must be positive, got {tau}")
    if mode not in NDF_MODES:
        raise ValidationError(f"unknown ndf mode {mode!r}, expected one of {NDF_MODES}")
    sim = nx.as_tensor(sim)
    identities = np.asarray(identities)
    n = sim.shape[0]
    if sim.shape != (n, n) or len(identities) != n:
        raise BatchError(f"similarity matrix {sim.shape} does not match {len(identities)} identities")
    same = identities[:, None] == identities[None, :]
    lonely = np.flatnonzero(~same.any(axis=1))
    if lonely.size:
        raise BatchError(f"rows without a positive column: {lonely.tolist()}")

    q = nx.Tensor(target_distribution(identities))
    total = None
    for logits in (sim * (1.0 / tau), sim.T * (1.0 / tau)):
        p = nx.softmax(logits, axis=-1)
        rows = nx.kl_div(p, q, eps)
        if mode == "ndf":
            rows = rows + nx.kl_div(q, p, eps)
        direction = rows.sum() * (1.0 / n)
        total = direction if total is None else total + direction
    return total


def select_hard_negatives(sim, identities):
    """
    Hardest different-identity partner for every image and every text.

    Works on plain values (no gradient). Ties go to the lowest index.

    :return (neg_text, neg_image): neg_text[a] is the text index for image a,
        neg_image[b] the image index for text b.
    """
    sim = np.asarray(sim.data if isinstance(sim, nx.Tensor) else sim, dtype=np.float64)
    identities = np.asarray(identities)
    different = identities[:, None] != identities[None, :]
    if not different.any(axis=1).all() or not different.any(axis=0).all():
        raise BatchError("hard negatives need at least two identities in the batch")
    masked = np.where(different, sim, -np.inf)
    neg_text = np.argmax(masked, axis=1)
    neg_image = np.argmax(masked, axis=0)
    return neg_text.astype(np.int64), neg_image.astype(np.int64)


def group_count(max_len, p, r):
    """kappa = floor((M - p) / r) + 1."""
    if r < 1:
        raise ConfigError(f"group stride must be at least 1, got {r}")
    if p < 1 or p > max_len:
        raise ConfigError(f"group size {p} must lie in [1, {max_len}]")
    return (max_len - p) // r + 1


def group_windows(max_len, p, r):
    """[start, stop) token rows of each group; the [ENC] row 0 is left to g_0."""
    windows = []
    for i in range(group_count(max_len, p, r)):
        start = 1 + i * r
        stop = min(start + p, max_len)
        if start >= max_len:
            break
        windows.append((start, stop))
    return windows


@dataclass
class GroupSet:
    features: nx.Tensor
    p: int
    r: int
    kappa: int


def group_features(fused, p, r):
    """
    g_0 = h_enc followed by kappa mean-pooled windows of the decoder rows.

    :param fused: (B, M_max, d) decoder output.
    :return GroupSet: features of shape (B, kappa + 1, d).
    """
    fused = nx.as_tensor(fused)
    if fused.ndim == 2:
        fused = fused.reshape(1, *fused.shape)
    max_len = fused.shape[1]
    kappa = group_count(max_len, p, r)
    parts = [fused[:, 0:1]]
    for start, stop in group_windows(max_len, p, r):
        parts.append(fused[:, start:stop].mean(axis=1, keepdims=True))
    if len(parts) != kappa + 1:
        raise ConfigError(f"only {len(parts) - 1} of {kappa} groups fit in {max_len} rows")
    return GroupSet(nx.concat(parts, axis=1), p, r, kappa)


def binary_match_loss(logp_pos, logp_neg_text, logp_neg_image):
    """
    -(1 / (|P| (kappa + 1))) * sum[log p̂(pos) + log(1 - p̂(neg_text)) + log(1 - p̂(neg_image))]

    Inputs are (|P|, kappa + 1, 2) log-probabilities over {match, mismatch}.
    """
    logp_pos, logp_neg_text, logp_neg_image = (
        nx.as_tensor(t) for t in (logp_pos, logp_neg_text, logp_neg_image)
    )
    n_pairs, n_groups = logp_pos.shape[0], logp_pos.shape[1]
    ll = (
        logp_pos[:, :, MATCH].sum()
        + logp_neg_text[:, :, MISMATCH].sum()
        + logp_neg_image[:, :, MISMATCH].sum()
    )
    return -ll * (1.0 / (n_pairs * n_groups))


def atp_loss(model, image_tokens, enc_ids, pad_mask, neg_text, neg_image, p, r):
    """
    Token-to-patch association loss.

    Decodes (I_a, T_a), (I_a, T_neg_text[a]) and (I_neg_image[a], T_a) in one
    decoder batch of 3 N_z rows, groups each output and scores every group.
    """
    n = enc_ids.shape[0]
    positives = np.arange(n)
    image_index = np.concatenate([positives, positives, np.asarray(neg_image)])
    text_index = np.concatenate([positives, np.asarray(neg_text), positives])
    images = nx.take(image_tokens, image_index, axis=0)
    fused = model.decode((enc_ids[text_index], pad_mask[text_index]), images)
    groups = group_features(fused, p, r)
    logp = nx.log_softmax(model.match_logits(groups.features), axis=-1)
    return binary_match_loss(logp[:n], logp[n : 2 * n], logp[2 * n :])


def masked_token_loss(logp, labels, owners):
    """
    Mean over pairs of the mean cross-entropy of each pair's masked tokens.

    :param logp: (K, Voc) log-probabilities at the K masked positions.
    :param labels: (K,) true token ids.
    :param owners: (K,) pair index owning each masked position.
    """
    labels = np.asarray(labels, dtype=np.int64)
    owners = np.asarray(owners, dtype=np.int64)
    uniq, counts = np.unique(owners, return_counts=True)
    per_owner = dict(zip(uniq.tolist(), counts.tolist()))
    weights = np.array([1.0 / (per_owner[o] * len(uniq)) for o in owners])
    picked = logp[np.arange(len(labels)), labels]
    return -(picked * weights).sum()


@dataclass
class AraResult:
    loss: nx.Tensor
    n_masked: int
    n_pairs: int

    @property
    def skipped(self):
        return self.n_pairs == 0


def ara_loss(model, image_tokens, masked_ids, pad_mask, mask_positions, mask_labels):
    """
    Region-to-attribute association loss over the masked captions.

    Pairs with no masked token are dropped from the decoder batch. When no pair
    has a mask the loss is a constant 0 and the result is flagged skipped.
    """
    keep = [i for i, pos in enumerate(mask_positions) if len(pos)]
    if not keep:
        log.warning("no masked attribute in batch; ARA term skipped")
        return AraResult(nx.Tensor(0.0), 0, 0)
    keep = np.asarray(keep, dtype=np.int64)
    images = nx.take(image_tokens, keep, axis=0)
    fused = model.decode((masked_ids[keep], pad_mask[keep]), images)
    max_len = fused.shape[1]

    rows, labels, owners = [], [], []
    for slot, i in enumerate(keep):
        rows.extend(slot * max_len + np.asarray(mask_positions[i]))
        labels.extend(mask_labels[i])
        owners.extend([slot] * len(mask_positions[i]))
    hidden = nx.take(fused.reshape(len(keep) * max_len, -1), np.asarray(rows), axis=0)
    logp = nx.log_softmax(model.mam_head(hidden), axis=-1)
    loss = masked_token_loss(logp, labels, owners)
    return AraResult(loss, len(labels), len(keep))


def total_loss(ndf, atp, ara, lam=0.1):
    """L = lam * ndf + atp + ara, plus the float breakdown for logging."""
    ndf, atp, ara = nx.as_tensor(ndf), nx.as_tensor(atp), nx.as_tensor(ara)
    total = ndf * lam + atp + ara
    breakdown = dict(ndf=ndf.item(), atp=atp.item(), ara=ara.item())
    breakdown["total"] = lam * breakdown["ndf"] + breakdown["atp"] + breakdown["ara"]
    return total, breakdown


@dataclass
class LossSwitches:
    use_ndf: bool = True
    use_atp: bool = True
    use_ara: bool = True
    ndf_mode: str = "ndf"
    tau: float = 0.02
    lam: float = 0.1
    eps: float = 1e-8
    group_size: int = 12
    group_stride: int = 12

    @classmethod
    def from_params(cls, params):
        return cls(
            use_ndf=params["loss.use_ndf"],
            use_atp=params["loss.use_atp"],
            use_ara=params["loss.use_ara"],
            ndf_mode=params["loss.ndf_mode"],
            tau=params["loss.tau"],
            lam=params["loss.lambda"],
            eps=params["loss.eps"],
            group_size=params["loss.group_size"],
            group_stride=params["loss.group_stride"],
        )


@dataclass
class StepLosses:
    total: nx.Tensor
    breakdown: dict
    neg_text: np.ndarray
    neg_image: np.ndarray
    ara_skipped: bool


def cada_step_losses(model, batch, switches):
    """
    One forward of the whole objective on a PairBatch.

    Disabled terms contribute a constant 0 and are logged as 0, so the
    breakdown always satisfies total = lam * ndf + atp + ara.
    """
    image_tokens, image_proj = model.embed_images(batch.images)
    _, text_proj = model.embed_texts((batch.cls_ids, batch.pad_mask))
    sim = similarity_matrix(image_proj, text_proj)
    neg_text, neg_image = select_hard_negatives(sim.data, batch.identities)

    zero = nx.Tensor(0.0)
    ndf = (
        ndf_loss(sim, batch.identities, switches.tau, switches.eps, switches.ndf_mode)
        if switches.use_ndf
        else zero
    )
    atp = (
        atp_loss(
            model,
            image_tokens,
            batch.enc_ids,
            batch.pad_mask,
            neg_text,
            neg_image,
            switches.group_size,
            switches.group_stride,
        )
        if switches.use_atp
        else zero
    )
    ara_skipped = True
    ara = zero
    if switches.use_ara:
        result = ara_loss(
            model,
            image_tokens,
            batch.masked_ids,
            batch.pad_mask,
            batch.mask_positions,
            batch.mask_labels,
        )
        ara, ara_skipped = result.loss, result.skipped
    total, breakdown = total_loss(ndf, atp, ara, switches.lam)
    return StepLosses(total, breakdown, neg_text, neg_image, ara_skipped)
