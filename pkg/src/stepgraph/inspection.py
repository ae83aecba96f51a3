"""Read-only analyses of a pre-trained encoder.

Patch-representation and positional-embedding similarity matrices, top-k
similar-patch retrieval, reconstruction overlays, and the CSV / SVG
writers used by the ``inspect`` command.
"""
from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .data import atomic_write, patchify
from .tensor_core import no_grad
from .tsformer import sample_mask

DIAG_TOL = 1e-9


class InspectError(ValueError):
    pass


@dataclass
class SimilarityMatrix:
    values: np.ndarray  # (P, P)
    subject: str  # "representations" or "positional-embeddings"
    node: int | None = None
    start: int | None = None


def cosine_matrix(rows, what="row"):
    rows = np.asarray(rows, dtype=np.float64)
    norms = np.linalg.norm(rows, axis=1)
    bad = np.flatnonzero(norms == 0)
    if len(bad):
        raise InspectError(f"zero-norm {what} {int(bad[0])}")
    unit = rows / norms[:, None]
    sim = unit @ unit.T
    sim = 0.5 * (sim + sim.T)
    np.fill_diagonal(sim, 1.0)
    return np.clip(sim, -1.0, 1.0)


def patch_similarity(source, node, start=None, ds=None):
    """Cosine similarity between the P patch representations of one node's window.

    ``source`` is a RepresentationBank (looked up by window start) or a
    TSFormer, in which case ``ds`` must be given and the window is encoded.
    """
    if hasattr(source, "lookup"):
        reps = source.lookup(node, start)
    else:
        if ds is None:
            raise InspectError("encoding a window needs the dataset")
        cfg = source.config
        x = patchify(ds.values, np.array([start]), cfg.P, cfg.L)[0, node]
        with no_grad():
            reps = source.encode_full(x).data
    return SimilarityMatrix(cosine_matrix(reps, "representation"), "representations", node, start)


def posemb_similarity(model):
    return SimilarityMatrix(cosine_matrix(model.pos.data, "positional embedding"), "positional-embeddings")


def top_k_similar(matrix, j, k=3):
    """Indices of the k entries most similar to j (j excluded); ties go to the lower index."""
    sim = matrix.values if isinstance(matrix, SimilarityMatrix) else np.asarray(matrix)
    P = sim.shape[0]
    if not 1 <= k <= P - 1:
        raise InspectError(f"k={k} outside [1, {P - 1}]")
    others = np.array([i for i in range(P) if i != j])
    order = np.lexsort((others, -sim[j, others]))
    return others[order[:k]]


def lag_profile(sim, lags):
    """Mean similarity over all patch pairs (i, i + lag) for each lag."""
    sim = np.asarray(sim)
    return {int(g): float(np.mean(np.diagonal(sim, offset=int(g)))) for g in lags}


def periodic_retrieval_rate(sim, period, k=3, probes=None):
    """Fraction of probe patches whose top-k neighbours include one at a multiple of ``period``."""
    sim = np.asarray(sim)
    probes = range(sim.shape[0]) if probes is None else probes
    hits = [np.any((np.abs(top_k_similar(sim, j, k) - j) % period) == 0) for j in probes]
    return float(np.mean(hits))


# -- reconstruction overlay ---------------------------------------------------------------
@dataclass
class ReconstructionRecord:
    time: np.ndarray  # absolute time index per step
    original: np.ndarray  # (P*L, C)
    masked: np.ndarray  # bool per step
    reconstruction: np.ndarray  # (P*L, C), NaN at unmasked steps

    def masked_mae(self):
        return float(np.mean(np.abs(self.reconstruction[self.masked] - self.original[self.masked])))


def reconstruction_dump(model, ds, node, start, mask_seed):
    cfg = model.config
    x = patchify(ds.values, np.array([start]), cfg.P, cfg.L)[0, node]
    mask = sample_mask(np.random.default_rng(mask_seed), cfg.P, cfg.r)
    with no_grad():
        recon = model(x, mask).data
    flags = np.zeros(cfg.P, dtype=bool)
    flags[mask.masked] = True
    steps = np.repeat(flags, cfg.L)
    C = cfg.channels
    original = x.reshape(cfg.P * cfg.L, C)
    out = np.full_like(original, np.nan)
    out[steps] = recon.reshape(cfg.P * cfg.L, C)[steps]
    return ReconstructionRecord(np.arange(start, start + cfg.P * cfg.L), original, steps, out)


def mean_fill_baseline(x, mask):
    """Fill every masked patch with the per-channel mean of the unmasked patches.

    ``x``: (P, L, C) one node's window; returns the filled (P, L, C) copy.
    """
    out = np.array(x, dtype=np.float64, copy=True)
    out[mask.masked] = out[mask.unmasked].mean(axis=(0, 1))
    return out


def copy_last_baseline(x, mask):
    """Fill each masked patch with the nearest earlier unmasked patch.

    Masked patches before the first unmasked one copy that first unmasked patch.
    """
    out = np.array(x, dtype=np.float64, copy=True)
    keep = mask.unmasked
    src = np.searchsorted(keep, mask.masked) - 1
    out[mask.masked] = out[keep[np.maximum(src, 0)]]
    return out


def baseline_maes(x, mask):
    """Masked-patch MAE of both naive fills for one (P, L, C) window."""
    m = mask.masked
    return {
        "unmasked_mean": float(np.mean(np.abs(mean_fill_baseline(x, mask)[m] - x[m]))),
        "copy_last": float(np.mean(np.abs(copy_last_baseline(x, mask)[m] - x[m]))),
    }


# -- writers -------------------------------------------------------------------------------
def _fmt(v):
    return "" if np.isnan(v) else repr(float(v))


def matrix_csv(values):
    buf = io.StringIO()
    for row in np.asarray(values):
        buf.write(",".join(repr(float(v)) for v in row) + "\n")
    return buf.getvalue()


def write_matrix_csv(path, values):
    atomic_write(path, matrix_csv(values).encode("utf-8"))


def reconstruction_csv(rec):
    C = rec.original.shape[1]
    head = ["t"] + [f"original_{c}" for c in range(C)] + ["masked"] + [f"reconstruction_{c}" for c in range(C)]
    lines = [",".join(head)]
    for i, t in enumerate(rec.time):
        row = [str(int(t))] + [repr(float(v)) for v in rec.original[i]] + [str(int(rec.masked[i]))]
        row += [_fmt(v) for v in rec.reconstruction[i]]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def _ramp(v):
    # blue (-1) -> white (0) -> red (+1)
    v = float(np.clip(v, -1, 1))
    if v >= 0:
        g = int(round(255 * (1 - v)))
        return f"#ff{g:02x}{g:02x}"
    g = int(round(255 * (1 + v)))
    return f"#{g:02x}{g:02x}ff"


def heatmap_svg(values, cell=4):
    values = np.asarray(values)
    n, m = values.shape
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{m * cell}" height="{n * cell}" '
             f'shape-rendering="crispEdges">']
    for i in range(n):
        for j in range(m):
            parts.append(f'<rect x="{j * cell}" y="{i * cell}" width="{cell}" height="{cell}" '
                         f'fill="{_ramp(values[i, j])}"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def reconstruction_svg(rec, width=900, height=240, channel=0):
    y = rec.original[:, channel]
    r = rec.reconstruction[:, channel]
    n = len(y)
    finite = np.concatenate([y, r[~np.isnan(r)]])
    lo, hi = float(finite.min()), float(finite.max())
    span = hi - lo if hi > lo else 1.0
    sx = width / max(n - 1, 1)

    def pt(i, v):
        return f"{i * sx:.2f},{height - (v - lo) / span * (height - 10) - 5:.2f}"

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">']
    # shade masked runs
    i = 0
    while i < n:
        if rec.masked[i]:
            j = i
            while j < n and rec.masked[j]:
                j += 1
            parts.append(f'<rect x="{i * sx:.2f}" y="0" width="{(j - i) * sx:.2f}" height="{height}" '
                         f'fill="#dddddd"/>')
            i = j
        else:
            i += 1
    parts.append('<polyline fill="none" stroke="#444444" stroke-width="1" points="'
                 + " ".join(pt(i, v) for i, v in enumerate(y)) + '"/>')
    # one polyline per contiguous masked run
    i = 0
    while i < n:
        if rec.masked[i]:
            j = i
            while j < n and rec.masked[j]:
                j += 1
            parts.append('<polyline fill="none" stroke="#d62728" stroke-width="1.5" points="'
                         + " ".join(pt(t, r[t]) for t in range(i, j)) + '"/>')
            i = j
        else:
            i += 1
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
