"""Weighted pairwise-sum engine shared by all pair estimators.

Every estimator here reduces to sums of the form

    sum over ordered pairs (i, j) of  u_i v_j * term(i, j)

with term one of: a contrast of observed outcomes H(Y_i, Y_j), a modeled
pairwise mean MU(i, j), or their difference. Cross-fitted estimators make the
weights and MU block-dependent: each pair belongs to a block determined by the
fold memberships of i and j, and every per-unit input is supplied as an array
indexed (block, unit).

Two strategies:

* ``tiled``: materializes the pair grid in fixed-height row tiles, always
  routing block-dependent inputs through per-entry gathers, and reduces
  per-tile partial sums in tile order. This makes results bit-identical
  across worker counts and bit-identical between a trivial one-block
  structure and a multi-fold structure fed identical per-block inputs.
* ``factored``: closed forms that avoid the pair grid entirely (rank-one
  factorizations, sorted prefix sums, category grouping), evaluated block by
  block. Much faster where available; agreement with tiled is to rounding,
  not bitwise.

``auto`` picks factored per request when a closed form exists.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .core import ContrastFunction

TILE = 256

__all__ = ["BlockStructure", "MuGauss", "MuOrdinal", "PairSumEngine", "TILE"]


@dataclass(frozen=True)
class BlockStructure:
    """Fold membership and the symmetric fold-pair -> block index map."""

    fold_of: np.ndarray  # (n,) fold index per unit
    block_id: np.ndarray  # (k, k) block index, block_id[a, b] == block_id[b, a]
    n_blocks: int

    @staticmethod
    def trivial(n: int) -> "BlockStructure":
        return BlockStructure(np.zeros(n, dtype=np.intp), np.zeros((1, 1), dtype=np.intp), 1)

    @property
    def n_folds(self) -> int:
        return self.block_id.shape[0]


@dataclass(frozen=True)
class MuGauss:
    """Pairwise mean built from Gaussian unit models: per-block conditional
    means for the row and column roles plus a per-block residual scale."""

    f_row: np.ndarray  # (L, n)
    f_col: np.ndarray  # (L, n)
    sigma: np.ndarray  # (L,)
    kind: str  # difference | geq | winpair

    @property
    def dim(self) -> int:
        return 2 if self.kind == "winpair" else 1


@dataclass(frozen=True)
class MuOrdinal:
    """Pairwise mean from ordinal unit models: per-block category
    probabilities for each role and the contrast's category matrix."""

    p_row: np.ndarray  # (L, n, q)
    p_col: np.ndarray  # (L, n, q)
    hmat: np.ndarray  # (dim, q, q)

    @property
    def dim(self) -> int:
        return self.hmat.shape[0]


def _as_blocked(a: np.ndarray, n_blocks: int) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = np.broadcast_to(a, (n_blocks, a.shape[0]))
    return a


class PairSumEngine:
    """Evaluates weighted pair sums for one dataset's outcome column."""

    def __init__(
        self,
        y: np.ndarray,
        contrast: ContrastFunction,
        structure: BlockStructure | None = None,
        ordinal_q: int | None = None,
        strategy: str = "auto",
        threads: int = 1,
    ) -> None:
        if strategy not in ("auto", "tiled", "factored"):
            raise ValueError(f"unknown strategy {strategy!r}")
        self.y = np.asarray(y, dtype=float)
        self.n = self.y.shape[0]
        self.contrast = contrast
        self.structure = structure if structure is not None else BlockStructure.trivial(self.n)
        self.ordinal_q = ordinal_q
        self.strategy = strategy
        self.threads = max(1, int(threads))
        self._fold_members = [
            np.flatnonzero(self.structure.fold_of == k) for k in range(self.structure.n_folds)
        ]

    # -- strategy selection -------------------------------------------------

    def _h_factored_ok(self) -> bool:
        return self.ordinal_q is not None or self.contrast.name in ("difference", "geq", "winpair")

    @staticmethod
    def _mu_factored_ok(mu) -> bool:
        if isinstance(mu, MuOrdinal):
            return True
        return mu.kind == "difference"

    def _pick(self, factored_ok: bool, what: str) -> str:
        if self.strategy == "tiled":
            return "tiled"
        if self.strategy == "factored":
            if not factored_ok:
                raise ValueError(f"no factored form for {what}")
            return "factored"
        return "factored" if factored_ok else "tiled"

    # -- public entry points ------------------------------------------------

    def h_sum(self, rows, cols, u, v, triangular: bool = False) -> np.ndarray:
        """sum over i in rows, j in cols of u_i v_j H(Y_i, Y_j).

        ``triangular`` restricts to index pairs i < j (the unordered-pair
        convention of the plug-in estimators); otherwise rows and cols must be
        disjoint index sets.
        """
        rows, cols, u, v = self._prep(rows, cols, u, v)
        if triangular:
            return self._triangular(rows, cols, u, v, "h", None)
        if self._pick(self._h_factored_ok(), f"h with contrast {self.contrast.name!r}") == "factored":
            return self._blocked_factored(rows, cols, u, v, "h", None, False)
        return self._tiled_sum(rows, cols, u, v, "h", None, False)

    def mu_sum(
        self, rows, cols, u, v, mu, exclude_diagonal: bool = False, triangular: bool = False
    ) -> np.ndarray:
        """sum u_i v_j MU(i, j), optionally dropping i == j pairs or (with
        ``triangular``) restricting to i < j."""
        rows, cols, u, v = self._prep(rows, cols, u, v)
        if triangular:
            return self._triangular(rows, cols, u, v, "mu", mu)
        if self._pick(self._mu_factored_ok(mu), "this pairwise-mean kind") == "factored":
            return self._blocked_factored(rows, cols, u, v, "mu", mu, exclude_diagonal)
        return self._tiled_sum(rows, cols, u, v, "mu", mu, exclude_diagonal)

    def resid_sum(self, rows, cols, u, v, mu) -> np.ndarray:
        """sum u_i v_j {H(Y_i, Y_j) - MU(i, j)} over disjoint rows x cols."""
        rows, cols, u, v = self._prep(rows, cols, u, v)
        ok = self._h_factored_ok() and self._mu_factored_ok(mu)
        if self._pick(ok, "residual term") == "factored":
            return self._blocked_factored(rows, cols, u, v, "resid", mu, False)
        return self._tiled_sum(rows, cols, u, v, "resid", mu, False)

    def _triangular(self, rows, cols, u, v, term, mu) -> np.ndarray:
        if self.structure.n_blocks != 1:
            raise ValueError("triangular sums support only the trivial block structure")
        if term == "h":
            ok = self.ordinal_q is not None or self.contrast.name == "difference"
        else:
            ok = isinstance(mu, MuOrdinal) or mu.kind == "difference"
        if self._pick(ok, "triangular closed form") == "factored":
            fn = self._tri_h if term == "h" else self._tri_mu
            return fn(rows, cols, u[0], v[0], mu)
        return self._tiled_sum(rows, cols, u, v, term, mu, False, upper=True)

    def _prep(self, rows, cols, u, v):
        rows = np.asarray(rows, dtype=np.intp)
        cols = np.asarray(cols, dtype=np.intp)
        nb = self.structure.n_blocks
        return rows, cols, _as_blocked(u, nb), _as_blocked(v, nb)

    def _dim(self, term: str, mu) -> int:
        return self.contrast.dim if term == "h" else mu.dim if term == "mu" else self.contrast.dim

    # -- tiled strategy -----------------------------------------------------

    def _tiled_sum(self, rows, cols, u, v, term, mu, exclude_diagonal, upper=False) -> np.ndarray:
        dim = self._dim(term, mu)
        out = np.zeros(dim)
        if rows.size == 0 or cols.size == 0:
            return out
        fold_of, block_id = self.structure.fold_of, self.structure.block_id
        col_folds = fold_of[cols]
        starts = range(0, rows.size, TILE)

        def one_tile(r0: int) -> np.ndarray:
            tr = rows[r0 : r0 + TILE]
            bgrid = block_id[fold_of[tr][:, None], col_folds[None, :]]
            w = u[bgrid, tr[:, None]] * v[bgrid, cols[None, :]]
            if exclude_diagonal:
                w = np.where(tr[:, None] == cols[None, :], 0.0, w)
            if upper:
                w = np.where(tr[:, None] < cols[None, :], w, 0.0)
            vals = self._tile_values(tr, cols, bgrid, term, mu)
            return np.array([np.sum(w * vals[c]) for c in range(dim)])

        if self.threads == 1:
            partials = [one_tile(r0) for r0 in starts]
        else:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                partials = list(pool.map(one_tile, starts))
        for part in partials:  # fixed tile-order reduction
            out += part
        return out

    def _tile_values(self, tr, cols, bgrid, term, mu):
        if term == "h":
            return self.contrast.pair_matrix(self.y[tr], self.y[cols])
        if term == "mu":
            return self._tile_mu(tr, cols, bgrid, mu)
        h = self.contrast.pair_matrix(self.y[tr], self.y[cols])
        return h - self._tile_mu(tr, cols, bgrid, mu)

    def _tile_mu(self, tr, cols, bgrid, mu):
        if isinstance(mu, MuGauss):
            fr = mu.f_row[bgrid, tr[:, None]]
            fc = mu.f_col[bgrid, cols[None, :]]
            diff = fr - fc
            if mu.kind == "difference":
                return diff[None, :, :]
            scaled = diff / (np.sqrt(2.0) * mu.sigma[bgrid])
            if mu.kind == "geq":
                return ndtr(scaled)[None, :, :]
            return np.stack([ndtr(scaled), ndtr(-scaled)])
        q = mu.hmat.shape[1]
        pr = [mu.p_row[bgrid, tr[:, None], qq] for qq in range(q)]
        pc = [mu.p_col[bgrid, cols[None, :], qq] for qq in range(q)]
        dim = mu.hmat.shape[0]
        acc = np.zeros((dim, tr.size, cols.size))
        for qq in range(q):
            for qp in range(q):
                prod = pr[qq] * pc[qp]
                for c in range(dim):
                    acc[c] += mu.hmat[c, qq, qp] * prod
        return acc

    # -- factored strategy --------------------------------------------------

    def _blocked_factored(self, rows, cols, u, v, term, mu, exclude_diagonal) -> np.ndarray:
        dim = self._dim(term, mu)
        out = np.zeros(dim)
        if rows.size == 0 or cols.size == 0:
            return out
        st = self.structure
        row_mask = np.zeros(self.n, dtype=bool)
        row_mask[rows] = True
        col_mask = np.zeros(self.n, dtype=bool)
        col_mask[cols] = True
        row_in = [m[row_mask[m]] for m in self._fold_members]
        col_in = [m[col_mask[m]] for m in self._fold_members]
        k = st.n_folds
        for a in range(k):
            for b in range(a, k):
                l = int(st.block_id[a, b])
                pairs = [(a, b)] if a == b else [(a, b), (b, a)]
                for fr_fold, fc_fold in pairs:
                    r, c = row_in[fr_fold], col_in[fc_fold]
                    if r.size == 0 or c.size == 0:
                        continue
                    drop_diag = exclude_diagonal and fr_fold == fc_fold
                    out += self._rect_factored(r, c, u[l], v[l], term, mu, l, drop_diag)
        return out

    def _rect_factored(self, r, c, ul, vl, term, mu, l, drop_diag) -> np.ndarray:
        if term == "h":
            return self._rect_h(r, c, ul, vl)
        if term == "mu":
            return self._rect_mu(r, c, ul, vl, mu, l, drop_diag)
        return self._rect_h(r, c, ul, vl) - self._rect_mu(r, c, ul, vl, mu, l, False)

    def _rect_h(self, r, c, ul, vl) -> np.ndarray:
        ur, vc = ul[r], vl[c]
        yr, yc = self.y[r], self.y[c]
        if self.ordinal_q is not None:
            q = self.ordinal_q
            uq = np.bincount(yr.astype(int) - 1, weights=ur, minlength=q)
            vq = np.bincount(yc.astype(int) - 1, weights=vc, minlength=q)
            hmat = self.contrast.category_matrix(q)
            return np.einsum("q,cqr,r->c", uq, hmat, vq)
        name = self.contrast.name
        if name == "difference":
            return np.array([np.sum(ur * yr) * np.sum(vc) - np.sum(ur) * np.sum(vc * yc)])
        order = np.argsort(yc, kind="stable")
        yc_sorted = yc[order]
        vpref = np.concatenate([[0.0], np.cumsum(vc[order])])
        vtot = vpref[-1]
        le = vpref[np.searchsorted(yc_sorted, yr, side="right")]  # sum of v over y_j <= y_i
        lt = vpref[np.searchsorted(yc_sorted, yr, side="left")]  # strictly less
        win = float(np.sum(ur * le))
        if name == "geq":
            return np.array([win])
        return np.array([win, float(np.sum(ur * (vtot - lt)))])  # winpair: (wins, losses)

    def _rect_mu(self, r, c, ul, vl, mu, l, drop_diag) -> np.ndarray:
        ur, vc = ul[r], vl[c]
        if isinstance(mu, MuGauss):
            fr, fc = mu.f_row[l][r], mu.f_col[l][c]
            total = np.sum(ur * fr) * np.sum(vc) - np.sum(ur) * np.sum(vc * fc)
            if drop_diag:
                both = np.intersect1d(r, c)
                if both.size:
                    total -= np.sum(
                        ul[both] * vl[both] * (mu.f_row[l][both] - mu.f_col[l][both])
                    )
            return np.array([total])
        q = mu.hmat.shape[1]
        uq = ur @ mu.p_row[l][r]  # (q,)
        vq = vc @ mu.p_col[l][c]
        out = np.einsum("q,cqr,r->c", uq, mu.hmat, vq)
        if drop_diag:
            both = np.intersect1d(r, c)
            if both.size:
                w = ul[both] * vl[both]
                mu_diag = np.einsum("iq,cqr,ir->ci", mu.p_row[l][both], mu.hmat, mu.p_col[l][both])
                out -= mu_diag @ w
        return out

    # -- triangular (i < j) closed forms ------------------------------------
    # rows/cols are ascending index arrays; prefix sums over the row set plus
    # a searchsorted per column give, for each j, the row mass at indices < j.

    def _row_prefix(self, rows, cols, weighted_rows: np.ndarray) -> np.ndarray:
        pref = np.concatenate([np.zeros((1,) + weighted_rows.shape[1:]), np.cumsum(weighted_rows, axis=0)])
        pos = np.searchsorted(rows, cols, side="left")
        return pref[pos]

    def _tri_h(self, rows, cols, u0, v0, _mu) -> np.ndarray:
        ur, vc = u0[rows], v0[cols]
        if self.ordinal_q is not None:
            q = self.ordinal_q
            onehot = np.zeros((rows.size, q))
            onehot[np.arange(rows.size), self.y[rows].astype(int) - 1] = 1.0
            cu = self._row_prefix(rows, cols, ur[:, None] * onehot)  # (c, q)
            hcol = self.contrast.category_matrix(q)[:, :, self.y[cols].astype(int) - 1]
            return np.einsum("jq,cqj,j->c", cu, hcol, vc)
        yr, yc = self.y[rows], self.y[cols]
        pu = self._row_prefix(rows, cols, ur)
        puy = self._row_prefix(rows, cols, ur * yr)
        return np.array([float(np.sum(vc * puy) - np.sum(vc * yc * pu))])

    def _tri_mu(self, rows, cols, u0, v0, mu) -> np.ndarray:
        ur, vc = u0[rows], v0[cols]
        if isinstance(mu, MuGauss):
            pu = self._row_prefix(rows, cols, ur)
            puf = self._row_prefix(rows, cols, ur * mu.f_row[0][rows])
            fc = mu.f_col[0][cols]
            return np.array([float(np.sum(vc * puf) - np.sum(vc * fc * pu))])
        cu = self._row_prefix(rows, cols, ur[:, None] * mu.p_row[0][rows])  # (c, q)
        return np.einsum("jq,cqr,jr,j->c", cu, mu.hmat, mu.p_col[0][cols], vc)
