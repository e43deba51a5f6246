"""Domain types, validation, the compositional link, and file ingestion.

Count tables are delimited text with taxon ids in the first row and sample ids
in the first column.  Design files are delimited text with a header; the roles
of the columns (numeric covariate, categorical blocking factor, interaction
product) come from the sidecar section of the run configuration, see
:mod:`mimix.config`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError, ValidationError

THETA_SHIFT_LIMIT = 700.0  # additive shifts remain exact up to this magnitude


def _freeze(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def inverse_log_ratio(theta: np.ndarray, axis: int = -1) -> np.ndarray:
    """Map unconstrained log-ratio coordinates to the simplex (softmax).

    Stable under large entries via max-subtraction, which is exact because the
    transform is invariant to adding a constant to every coordinate.
    """
    theta = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise ValidationError("inverse_log_ratio requires finite input")
    shifted = theta - theta.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass(frozen=True)
class Composition:
    """A point on the simplex together with its log-ratio coordinates."""

    theta: np.ndarray
    phi: np.ndarray

    @classmethod
    def from_theta(cls, theta: np.ndarray) -> "Composition":
        theta = np.asarray(theta, dtype=float).copy()
        phi = inverse_log_ratio(theta)
        return cls(theta=_freeze(theta), phi=_freeze(phi))

    def __post_init__(self):
        if self.phi.shape != self.theta.shape:
            raise ValidationError("theta and phi dimensions differ")
        if np.any(self.phi < 0) or abs(self.phi.sum() - 1.0) > 1e-10:
            raise ValidationError("phi must lie on the simplex")


@dataclass(frozen=True)
class CountTable:
    """n x K nonnegative integer abundance matrix with per-sample totals."""

    counts: np.ndarray
    sample_ids: tuple[str, ...]
    taxon_ids: tuple[str, ...]
    totals: np.ndarray = field(init=False)

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 2:
            raise ValidationError("counts must be a 2-D matrix")
        if not np.issubdtype(counts.dtype, np.integer):
            raise ValidationError("counts must be integers")
        if np.any(counts < 0):
            i, k = np.argwhere(counts < 0)[0]
            raise ValidationError(
                f"negative count at sample '{self.sample_ids[i]}', "
                f"taxon '{self.taxon_ids[k]}'")
        n, k = counts.shape
        if len(self.sample_ids) != n or len(self.taxon_ids) != k:
            raise ValidationError("id labels do not match matrix dimensions")
        if len(set(self.sample_ids)) != n:
            raise ValidationError("duplicate sample ids")
        if len(set(self.taxon_ids)) != k:
            raise ValidationError("duplicate taxon ids")
        totals = counts.sum(axis=1)
        if np.any(totals < 1):
            bad = self.sample_ids[int(np.argmin(totals))]
            raise ValidationError(f"sample '{bad}' has zero total count")
        object.__setattr__(self, "counts", _freeze(counts.astype(np.int64)))
        object.__setattr__(self, "totals", _freeze(totals.astype(np.int64)))

    @classmethod
    def from_arrays(cls, counts, sample_ids, taxon_ids,
                    require_observed_taxa: bool = True) -> "CountTable":
        """Build and validate a table.

        ``require_observed_taxa`` rejects all-zero taxon columns (their
        composition coordinate is unidentifiable); internal resampling paths
        such as cross-validation folds may switch the check off.
        """
        table = cls(counts=np.asarray(counts),
                    sample_ids=tuple(str(s) for s in sample_ids),
                    taxon_ids=tuple(str(t) for t in taxon_ids))
        if require_observed_taxa:
            col = np.asarray(table.counts).sum(axis=0)
            if np.any(col == 0):
                bad = table.taxon_ids[int(np.argmin(col > 0))]
                raise ValidationError(
                    f"taxon '{bad}' is never observed (all-zero column)")
        return table

    @property
    def n_samples(self) -> int:
        return self.counts.shape[0]

    @property
    def n_taxa(self) -> int:
        return self.counts.shape[1]


@dataclass(frozen=True)
class DesignSpec:
    """Roles of the design-file columns."""

    covariates: tuple[str, ...]
    blocks: tuple[str, ...] = ()
    interactions: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        if len(self.covariates) < 1:
            raise ValidationError("at least one covariate is required")
        for a, b in self.interactions:
            if a not in self.covariates or b not in self.covariates:
                raise ValidationError(
                    f"interaction '{a}*{b}' references unknown covariates")


@dataclass(frozen=True)
class ExperimentDesign:
    """Fixed-effect covariates plus an ordered nesting chain of block factors.

    ``blocks[:, r]`` holds 0-based indices into level r of the chain; nested
    labels are keyed by their full ancestry so that e.g. block "1" of two
    different sites maps to two distinct levels.
    """

    covariates: np.ndarray                     # (n, p) float
    covariate_names: tuple[str, ...]
    blocks: np.ndarray                         # (n, R) int, R >= 1
    level_counts: tuple[int, ...]              # q_r per factor
    block_names: tuple[tuple[str, ...], ...]   # labels per level, file order

    def __post_init__(self):
        x = np.asarray(self.covariates, dtype=float)
        if x.ndim != 2 or x.shape[1] < 1:
            raise ValidationError("covariates must be n x p with p >= 1")
        if not np.all(np.isfinite(x)):
            raise ValidationError("covariates contain missing or non-finite values")
        z = np.asarray(self.blocks)
        if z.ndim != 2 or z.shape[0] != x.shape[0] or z.shape[1] < 1:
            raise ValidationError("blocks must align with covariate rows")
        for r, q in enumerate(self.level_counts):
            seen = np.unique(z[:, r])
            if q < 1 or len(seen) != q or seen.min() != 0 or seen.max() != q - 1:
                raise ValidationError(
                    f"blocking factor {r} must use every label in 1..{q}")
        if len(self.covariate_names) != x.shape[1]:
            raise ValidationError("covariate names do not match columns")
        object.__setattr__(self, "covariates", _freeze(x))
        object.__setattr__(self, "blocks", _freeze(z.astype(np.int64)))

    @property
    def n_samples(self) -> int:
        return self.covariates.shape[0]

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[1]

    @property
    def n_levels(self) -> int:
        return self.blocks.shape[1]


# ---------------------------------------------------------------------------
# file ingestion
# ---------------------------------------------------------------------------

def _sniff_delimiter(line: str) -> str:
    return "\t" if "\t" in line else ","


def _read_rows(path: str) -> tuple[list[list[str]], str]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ParseError(f"cannot read '{path}': {exc}") from exc
    lines = [ln for ln in raw.splitlines() if ln.strip() != ""]
    if not lines:
        raise ParseError(f"'{path}' is empty")
    delim = _sniff_delimiter(lines[0])
    return [ln.split(delim) for ln in lines], delim


def load_count_table(path: str) -> CountTable:
    """Parse a delimited count table; errors carry file and line context."""
    rows, _ = _read_rows(path)
    header = [c.strip() for c in rows[0]]
    taxon_ids = header[1:]
    if len(taxon_ids) < 1:
        raise ParseError(f"{path}:1: no taxon columns in header")
    if len(set(taxon_ids)) != len(taxon_ids):
        dup = next(t for t in taxon_ids if taxon_ids.count(t) > 1)
        raise ParseError(f"{path}:1: duplicate taxon id '{dup}'")

    sample_ids: list[str] = []
    counts = np.zeros((len(rows) - 1, len(taxon_ids)), dtype=np.int64)
    for line_no, row in enumerate(rows[1:], start=2):
        cells = [c.strip() for c in row]
        if len(cells) != len(taxon_ids) + 1:
            raise ParseError(
                f"{path}:{line_no}: expected {len(taxon_ids) + 1} cells, "
                f"found {len(cells)}")
        sample_ids.append(cells[0])
        for k, cell in enumerate(cells[1:]):
            try:
                value = int(cell)
            except ValueError:
                raise ParseError(
                    f"{path}:{line_no}: non-integer count '{cell}' in "
                    f"column '{taxon_ids[k]}'") from None
            if value < 0:
                raise ParseError(
                    f"{path}:{line_no}: negative count in column "
                    f"'{taxon_ids[k]}'")
            counts[line_no - 2, k] = value

    if len(set(sample_ids)) != len(sample_ids):
        dup = next(s for s in sample_ids if sample_ids.count(s) > 1)
        raise ParseError(f"{path}: duplicate sample id '{dup}'")
    zero_cols = np.flatnonzero(counts.sum(axis=0) == 0)
    if zero_cols.size:
        raise ParseError(
            f"{path}: taxon '{taxon_ids[zero_cols[0]]}' is never observed "
            f"(all-zero column)")
    zero_rows = np.flatnonzero(counts.sum(axis=1) == 0)
    if zero_rows.size:
        raise ParseError(
            f"{path}:{zero_rows[0] + 2}: sample '{sample_ids[zero_rows[0]]}' "
            f"has zero total count")
    return CountTable.from_arrays(counts, sample_ids, taxon_ids)


def write_count_table(table: CountTable, path: str, delimiter: str = "\t") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(delimiter.join(["sample_id", *table.taxon_ids]) + "\n")
        for i, sid in enumerate(table.sample_ids):
            cells = [sid, *(str(int(v)) for v in table.counts[i])]
            fh.write(delimiter.join(cells) + "\n")


def load_design(path: str, spec: DesignSpec, n_expected: int) -> ExperimentDesign:
    """Parse a design file under `spec`, building interaction product columns.

    Block labels map to indices in first-appearance order; labels of nested
    factors are disambiguated by their ancestry in the chain.
    """
    rows, _ = _read_rows(path)
    header = [c.strip() for c in rows[0]]
    col_index = {name: j for j, name in enumerate(header)}
    for name in (*spec.covariates, *spec.blocks):
        if name not in col_index:
            raise ParseError(f"{path}:1: design column '{name}' not found")

    body = rows[1:]
    if len(body) != n_expected:
        raise ParseError(
            f"{path}: expected {n_expected} data rows, found {len(body)}")

    n = len(body)
    base = np.empty((n, len(spec.covariates)))
    block_labels: list[list[str]] = [[] for _ in spec.blocks]
    for line_no, row in enumerate(body, start=2):
        cells = [c.strip() for c in row]
        if len(cells) != len(header):
            raise ParseError(
                f"{path}:{line_no}: expected {len(header)} cells, "
                f"found {len(cells)}")
        i = line_no - 2
        for j, name in enumerate(spec.covariates):
            cell = cells[col_index[name]]
            if cell == "":
                raise ParseError(
                    f"{path}:{line_no}: missing value for covariate '{name}'")
            try:
                base[i, j] = float(cell)
            except ValueError:
                raise ParseError(
                    f"{path}:{line_no}: non-numeric value '{cell}' for "
                    f"covariate '{name}'") from None
        for r, name in enumerate(spec.blocks):
            cell = cells[col_index[name]]
            if cell == "":
                raise ParseError(
                    f"{path}:{line_no}: missing block label for '{name}'")
            block_labels[r].append(cell)

    names = list(spec.covariates)
    columns = [base[:, j] for j in range(base.shape[1])]
    for a, b in spec.interactions:
        columns.append(base[:, spec.covariates.index(a)]
                       * base[:, spec.covariates.index(b)])
        names.append(f"{a}*{b}")
    x = np.column_stack(columns)
    dead = np.flatnonzero(np.all(x == 0.0, axis=0))
    if dead.size:
        raise ParseError(
            f"{path}: covariate '{names[dead[0]]}' is identically zero")

    if not spec.blocks:
        raise ValidationError("design requires at least one blocking factor")
    blocks = np.zeros((n, len(spec.blocks)), dtype=np.int64)
    level_counts: list[int] = []
    level_names: list[tuple[str, ...]] = []
    ancestry = [""] * n
    for r in range(len(spec.blocks)):
        keyed = [f"{ancestry[i]}/{block_labels[r][i]}" if ancestry[i]
                 else block_labels[r][i] for i in range(n)]
        order: dict[str, int] = {}
        for key in keyed:
            if key not in order:
                order[key] = len(order)
        blocks[:, r] = [order[key] for key in keyed]
        level_counts.append(len(order))
        level_names.append(tuple(order))
        ancestry = keyed

    return ExperimentDesign(covariates=x, covariate_names=tuple(names),
                            blocks=blocks, level_counts=tuple(level_counts),
                            block_names=tuple(level_names))


def write_design(design: ExperimentDesign, path: str, delimiter: str = ",") -> None:
    """Write a design back out; interaction columns are omitted (re-derived)."""
    plain = [j for j, name in enumerate(design.covariate_names) if "*" not in name]
    block_cols = []
    for r in range(design.n_levels):
        labels = design.block_names[r]
        block_cols.append([labels[idx].split("/")[-1] for idx in design.blocks[:, r]])
    header = ([design.covariate_names[j] for j in plain]
              + [f"block{r}" for r in range(design.n_levels)])
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(delimiter.join(header) + "\n")
        for i in range(design.n_samples):
            cells = [repr(float(design.covariates[i, j])) for j in plain]
            cells += [block_cols[r][i] for r in range(design.n_levels)]
            fh.write(delimiter.join(cells) + "\n")
