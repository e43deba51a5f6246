"""Posterior archives: retained draws, streaming summaries, disk layout.

On disk an archive is a directory holding a plain-text key-value manifest,
one flat binary file per retained-draw block (little-endian float64,
row-major, self-describing dim header), id lists, and small summary CSVs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EngineError, ValidationError

_BIN_MAGIC = b"MIMIXBIN"
_BIN_VERSION = 1


@dataclass
class PosteriorArchive:
    """Thinned retained draws plus streaming accumulators for one chain."""

    chain_id: int
    seed: int
    config_hash: str
    variant: str
    level_counts: tuple[int, ...]
    iterations: int
    burn_in: int
    thin: int
    sample_ids: tuple[str, ...]
    taxon_ids: tuple[str, ...]
    covariate_names: tuple[str, ...]

    beta: np.ndarray            # (D, K, p)
    mu: np.ndarray              # (D, K)
    sigma_sq: np.ndarray        # (D, K)
    sigma_mu_sq: np.ndarray     # (D,)
    sigma_g_sq: np.ndarray      # (D, R)
    sigma_b_sq: np.ndarray      # (D,)
    omega: np.ndarray           # (D, p, L)
    pi: np.ndarray              # (D, p)
    b: np.ndarray               # (D, p, L)
    g: list[np.ndarray]         # per level (D, q_r, L)
    lambda_draws: np.ndarray | None   # (D, K, L) when retained

    mean_theta: np.ndarray      # (n, K)
    mean_phi: np.ndarray        # (n, K)
    mean_lambda: np.ndarray | None    # (K, L); None means identity loadings
    omega_frequency: np.ndarray       # (p, L)

    adapt_sweeps: np.ndarray    # (W,)
    adapt_rates: np.ndarray     # (W,)
    adapt_epsilons: np.ndarray  # (W,)
    final_epsilon: float = 0.0
    sampling_acceptance: float = 0.0
    wall_time: float = 0.0
    n_filled: int = field(default=0)

    @property
    def n_draws(self) -> int:
        return self.beta.shape[0]

    @property
    def n_samples(self) -> int:
        return self.mean_theta.shape[0]

    @property
    def n_taxa(self) -> int:
        return self.mean_theta.shape[1]

    @property
    def n_covariates(self) -> int:
        return self.pi.shape[1]

    @property
    def n_factors(self) -> int:
        return self.omega.shape[2]

    @property
    def with_factors(self) -> bool:
        return self.variant == "factors"


def planned_draw_count(iterations: int, burn_in: int, thin: int) -> int:
    """Retained draws: sampling sweeps t with (t - burn_in) divisible by thin."""
    return (iterations - burn_in) // thin


def allocate_archive(model, config, chain_id: int, sample_ids, taxon_ids,
                     covariate_names) -> PosteriorArchive:
    n, K, L = model.n_samples, model.n_taxa, model.n_factors
    p = model.n_covariates
    d = planned_draw_count(config.iterations, config.burn_in, config.thin)
    retain_lambda = config.retain_lambda and model.with_factors
    return PosteriorArchive(
        chain_id=chain_id,
        seed=config.seed,
        config_hash=config.hash(),
        variant=config.variant,
        level_counts=tuple(model.level_counts),
        iterations=config.iterations,
        burn_in=config.burn_in,
        thin=config.thin,
        sample_ids=tuple(sample_ids),
        taxon_ids=tuple(taxon_ids),
        covariate_names=tuple(covariate_names),
        beta=np.zeros((d, K, p)),
        mu=np.zeros((d, K)),
        sigma_sq=np.zeros((d, K)),
        sigma_mu_sq=np.zeros(d),
        sigma_g_sq=np.zeros((d, len(model.level_counts))),
        sigma_b_sq=np.zeros(d),
        omega=np.zeros((d, p, L)),
        pi=np.zeros((d, p)),
        b=np.zeros((d, p, L)),
        g=[np.zeros((d, q, L)) for q in model.level_counts],
        lambda_draws=np.zeros((d, K, L)) if retain_lambda else None,
        mean_theta=np.zeros((n, K)),
        mean_phi=np.zeros((n, K)),
        mean_lambda=np.zeros((K, L)) if model.with_factors else None,
        omega_frequency=np.zeros((p, L)),
        adapt_sweeps=np.zeros(0, dtype=np.int64),
        adapt_rates=np.zeros(0),
        adapt_epsilons=np.zeros(0),
    )


def record_draw(archive: PosteriorArchive, state, model) -> None:
    """Append one retained draw and fold it into the streaming accumulators."""
    from .data import inverse_log_ratio

    t = archive.n_filled
    archive.beta[t] = state.beta()
    archive.mu[t] = state.mu
    archive.sigma_sq[t] = state.sigma_sq
    archive.sigma_mu_sq[t] = state.sigma_mu_sq
    archive.sigma_g_sq[t] = state.sigma_g_sq
    archive.sigma_b_sq[t] = state.sigma_b_sq
    archive.omega[t] = state.omega
    archive.pi[t] = state.pi
    archive.b[t] = state.b
    for r, g in enumerate(state.G):
        archive.g[r][t] = g
    if archive.lambda_draws is not None:
        archive.lambda_draws[t] = state.Lambda
    archive.n_filled = t + 1

    w_new = 1.0 / archive.n_filled
    archive.mean_theta += w_new * (state.theta - archive.mean_theta)
    archive.mean_phi += w_new * (inverse_log_ratio(state.theta)
                                 - archive.mean_phi)
    if archive.mean_lambda is not None:
        archive.mean_lambda += w_new * (state.Lambda - archive.mean_lambda)
    archive.omega_frequency += w_new * (state.omega - archive.omega_frequency)


def record_adaptation(archive: PosteriorArchive, sweep: int, rate: float,
                      epsilon: float) -> None:
    archive.adapt_sweeps = np.append(archive.adapt_sweeps, sweep)
    archive.adapt_rates = np.append(archive.adapt_rates, rate)
    archive.adapt_epsilons = np.append(archive.adapt_epsilons, epsilon)


# ---------------------------------------------------------------------------
# disk format
# ---------------------------------------------------------------------------

_DTYPE_CODES = {0: np.dtype("<f8"), 1: np.dtype("<i8")}


def write_array(path: Path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    if arr.dtype == np.float64:
        code = 0
    elif arr.dtype == np.int64:
        code = 1
    else:
        raise EngineError(f"unsupported archive dtype {arr.dtype}")
    with open(path, "wb") as fh:
        fh.write(_BIN_MAGIC)
        fh.write(struct.pack("<BBB", _BIN_VERSION, code, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.astype(_DTYPE_CODES[code], copy=False).tobytes())


def read_array(path: Path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(8) != _BIN_MAGIC:
            raise EngineError(f"{path}: not an archive array file")
        version, code, ndim = struct.unpack("<BBB", fh.read(3))
        if version != _BIN_VERSION or code not in _DTYPE_CODES:
            raise EngineError(f"{path}: unsupported array format")
        shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
        data = np.frombuffer(fh.read(), dtype=_DTYPE_CODES[code])
    return data.reshape(shape).copy()


_SCALARS = ("chain_id", "seed", "config_hash", "variant", "iterations",
            "burn_in", "thin", "final_epsilon", "sampling_acceptance",
            "wall_time", "n_filled")
_ARRAYS = ("beta", "mu", "sigma_sq", "sigma_mu_sq", "sigma_g_sq",
           "sigma_b_sq", "omega", "pi", "b", "mean_theta", "mean_phi",
           "omega_frequency", "adapt_sweeps", "adapt_rates", "adapt_epsilons")
_OPTIONAL_ARRAYS = ("lambda_draws", "mean_lambda")


def save_archive(archive: PosteriorArchive, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    lines = [f"{key} = {getattr(archive, key)}" for key in _SCALARS]
    lines.append(f"level_counts = {','.join(map(str, archive.level_counts))}")
    lines.append(f"n_draws = {archive.n_draws}")
    lines.append(f"n_samples = {archive.n_samples}")
    lines.append(f"n_taxa = {archive.n_taxa}")
    lines.append(f"n_covariates = {archive.n_covariates}")
    lines.append(f"n_factors = {archive.n_factors}")
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n",
                                            encoding="utf-8")
    (directory / "samples.txt").write_text(
        "\n".join(archive.sample_ids) + "\n", encoding="utf-8")
    (directory / "taxa.txt").write_text(
        "\n".join(archive.taxon_ids) + "\n", encoding="utf-8")
    (directory / "covariates.txt").write_text(
        "\n".join(archive.covariate_names) + "\n", encoding="utf-8")

    for name in _ARRAYS:
        write_array(directory / f"{name}.bin", np.asarray(getattr(archive, name)))
    for name in _OPTIONAL_ARRAYS:
        value = getattr(archive, name)
        if value is not None:
            write_array(directory / f"{name}.bin", value)
    for r, g in enumerate(archive.g):
        write_array(directory / f"g_{r}.bin", g)

    _write_summary_csvs(archive, directory)


def _fmt(x: float) -> str:
    return repr(float(x))


def _write_summary_csvs(archive: PosteriorArchive, directory: Path) -> None:
    with open(directory / "beta_summary.csv", "w", encoding="utf-8") as fh:
        fh.write("taxon_id,covariate,mean\n")
        means = archive.beta[: archive.n_filled].mean(axis=0) \
            if archive.n_filled else np.zeros(archive.beta.shape[1:])
        for k, taxon in enumerate(archive.taxon_ids):
            for j, cov in enumerate(archive.covariate_names):
                fh.write(f"{taxon},{cov},{_fmt(means[k, j])}\n")
    with open(directory / "acceptance.csv", "w", encoding="utf-8") as fh:
        fh.write("sweep,rate,epsilon\n")
        for s, r, e in zip(archive.adapt_sweeps, archive.adapt_rates,
                           archive.adapt_epsilons):
            fh.write(f"{int(s)},{_fmt(r)},{_fmt(e)}\n")


def load_archive(directory: str | Path) -> PosteriorArchive:
    directory = Path(directory)
    manifest_path = directory / "manifest.txt"
    if not manifest_path.exists():
        raise ValidationError(f"no archive manifest in '{directory}'")
    manifest: dict[str, str] = {}
    for line in manifest_path.read_text(encoding="utf-8").splitlines():
        if "=" in line:
            key, value = (part.strip() for part in line.split("=", 1))
            manifest[key] = value

    def ids(name):
        return tuple((directory / name).read_text(encoding="utf-8").split())

    arrays = {name: read_array(directory / f"{name}.bin") for name in _ARRAYS}
    optional = {name: (read_array(directory / f"{name}.bin")
                       if (directory / f"{name}.bin").exists() else None)
                for name in _OPTIONAL_ARRAYS}
    level_counts = tuple(int(v) for v in manifest["level_counts"].split(",")
                         if v != "")
    g = [read_array(directory / f"g_{r}.bin") for r in range(len(level_counts))]

    return PosteriorArchive(
        chain_id=int(manifest["chain_id"]),
        seed=int(manifest["seed"]),
        config_hash=manifest["config_hash"],
        variant=manifest["variant"],
        level_counts=level_counts,
        iterations=int(manifest["iterations"]),
        burn_in=int(manifest["burn_in"]),
        thin=int(manifest["thin"]),
        sample_ids=ids("samples.txt"),
        taxon_ids=ids("taxa.txt"),
        covariate_names=ids("covariates.txt"),
        g=g,
        lambda_draws=optional["lambda_draws"],
        mean_lambda=optional["mean_lambda"],
        final_epsilon=float(manifest["final_epsilon"]),
        sampling_acceptance=float(manifest["sampling_acceptance"]),
        wall_time=float(manifest["wall_time"]),
        n_filled=int(manifest["n_filled"]),
        **arrays,
    )


def archives_equal(a: PosteriorArchive, b: PosteriorArchive) -> bool:
    """Bitwise equality of every draw, accumulator, and scalar."""
    if (a.chain_id, a.seed, a.config_hash, a.variant) != \
            (b.chain_id, b.seed, b.config_hash, b.variant):
        return False
    if (a.final_epsilon, a.sampling_acceptance, a.n_filled) != \
            (b.final_epsilon, b.sampling_acceptance, b.n_filled):
        return False
    for name in _ARRAYS:
        if not np.array_equal(np.asarray(getattr(a, name)),
                              np.asarray(getattr(b, name))):
            return False
    for name in _OPTIONAL_ARRAYS:
        va, vb = getattr(a, name), getattr(b, name)
        if (va is None) != (vb is None):
            return False
        if va is not None and not np.array_equal(va, vb):
            return False
    return all(np.array_equal(ga, gb) for ga, gb in zip(a.g, b.g))
