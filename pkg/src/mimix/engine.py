"""Chain orchestration: burn-in adaptation, thinning, checkpoints, parallelism.

Step-size adaptation runs only during burn-in and the step size is frozen
afterwards.  All randomness flows from (seed, chain, site) streams, so a chain
is bit-reproducible, checkpoint-resume continues the identical sequence, and
parallel execution matches sequential execution exactly.
"""

from __future__ import annotations

import concurrent.futures
import logging
import os
import pickle
import time
import warnings
from pathlib import Path

import numpy as np

from .archive import (
    PosteriorArchive,
    allocate_archive,
    record_adaptation,
    record_draw,
)
from .config import ModelConfig
from .data import CountTable, ExperimentDesign
from .errors import EngineError, ValidationError
from .gibbs import MarkovState, ModelData, build_model, gibbs_sweep, init_state
from .hmc import HmcSettings, adapt_epsilon
from .rng import stream_bundle

logger = logging.getLogger("mimix")

_CKPT_MAGIC = b"MIMIXCK1"

_STATE_FIELDS = ("theta", "mu", "Lambda", "psi", "xi", "tau", "nu", "a",
                 "F", "G", "b", "omega", "pi", "sigma_sq", "sigma_mu_sq",
                 "sigma_g_sq", "sigma_b_sq")


def save_checkpoint(path: str | Path, state: MarkovState, streams,
                    settings: HmcSettings, archive: PosteriorArchive,
                    sweep: int, window_accepts: int, window_start: int,
                    sampling_accepts: int = 0, sampling_sweeps: int = 0) -> None:
    """Serialize the full Markov state, stream positions, and archive."""
    payload = {
        "state": {name: getattr(state, name) for name in _STATE_FIELDS},
        "rng": {name: gen.bit_generator.state for name, gen in streams.items()},
        "settings": settings,
        "archive": archive,
        "sweep": sweep,
        "window_accepts": window_accepts,
        "window_start": window_start,
        "sampling_accepts": sampling_accepts,
        "sampling_sweeps": sampling_sweeps,
        "config_hash": archive.config_hash,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        pickle.dump(payload, fh, protocol=pickle.HIGHEST_PROTOCOL)


def load_checkpoint(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(8) != _CKPT_MAGIC:
            raise EngineError(f"'{path}' is not a checkpoint file")
        try:
            return pickle.load(fh)
        except Exception as exc:
            raise EngineError(f"corrupt checkpoint '{path}': {exc}") from exc


def run_chain(table: CountTable, design: ExperimentDesign, config: ModelConfig,
              chain_id: int = 0, checkpoint_path: str | None = None,
              checkpoint_every: int = 0, resume_from: str | None = None,
              ) -> PosteriorArchive:
    """Execute one chain: adaptive burn-in, frozen sampling, thinned archive."""
    config = config.resolved(table.n_samples, table.n_taxa)
    if config.n_factors > min(table.n_samples, table.n_taxa):
        warnings.warn(
            f"n_factors={config.n_factors} exceeds min(n, K)="
            f"{min(table.n_samples, table.n_taxa)}; the loading matrix is "
            f"rank-deficient", stacklevel=2)
    model = build_model(table, design, config)
    start = time.monotonic()

    if resume_from is not None:
        payload = load_checkpoint(resume_from)
        if payload["config_hash"] != config.hash():
            raise EngineError("checkpoint config does not match this run")
        archive: PosteriorArchive = payload["archive"]
        if (archive.n_samples, archive.n_taxa) != (model.n_samples,
                                                   model.n_taxa):
            raise EngineError("checkpoint dimensions do not match the data")
        streams = stream_bundle(config.seed, chain_id)
        for name, gen in streams.items():
            gen.bit_generator.state = payload["rng"][name]
        state = MarkovState(**payload["state"])
        settings = payload["settings"]
        first_sweep = payload["sweep"] + 1
        window_accepts = payload["window_accepts"]
        window_start = payload["window_start"]
        sampling_accepts = payload.get("sampling_accepts", 0)
        sampling_sweeps = payload.get("sampling_sweeps", 0)
    else:
        streams = stream_bundle(config.seed, chain_id)
        state = init_state(model, streams["init"])
        archive = allocate_archive(model, config, chain_id, table.sample_ids,
                                   table.taxon_ids, design.covariate_names)
        settings = HmcSettings(epsilon=config.epsilon0, n_steps=config.n_steps,
                               accept_low=config.accept_low,
                               accept_high=config.accept_high,
                               adapt_window=config.adapt_window)
        first_sweep = 1
        window_accepts = 0
        window_start = 0
        sampling_accepts = 0
        sampling_sweeps = 0

    for sweep in range(first_sweep, config.iterations + 1):
        accepted = gibbs_sweep(state, model, settings, streams["hmc"],
                               streams["gibbs"])
        window_accepts += accepted
        if sweep > config.burn_in:
            sampling_accepts += accepted
            sampling_sweeps += 1

        if not np.all(np.isfinite(state.theta)):
            reference = checkpoint_path if checkpoint_path else "none"
            raise EngineError(
                f"non-finite state at sweep {sweep}; last checkpoint: "
                f"{reference}")

        if sweep <= config.burn_in:
            if (sweep - window_start) >= settings.adapt_window:
                rate = window_accepts / ((sweep - window_start)
                                         * model.n_samples)
                settings = adapt_epsilon(settings, rate)
                record_adaptation(archive, sweep, rate, settings.epsilon)
                window_accepts = 0
                window_start = sweep
        elif sweep - config.burn_in >= 1 and window_start < config.burn_in:
            # entering the sampling phase: freeze epsilon for good
            window_accepts = 0
            window_start = sweep

        if sweep > config.burn_in and (sweep - config.burn_in) % config.thin == 0:
            record_draw(archive, state, model)

        if checkpoint_path and checkpoint_every and sweep % checkpoint_every == 0:
            save_checkpoint(checkpoint_path, state, streams, settings, archive,
                            sweep, window_accepts, window_start,
                            sampling_accepts, sampling_sweeps)

    archive.final_epsilon = settings.epsilon
    archive.sampling_acceptance = (
        sampling_accepts / (sampling_sweeps * model.n_samples)
        if sampling_sweeps else 0.0)
    archive.wall_time = time.monotonic() - start
    logger.info("chain %d finished: %d retained draws, acceptance %.3f, "
                "epsilon %.4g, %.1fs", chain_id, archive.n_filled,
                archive.sampling_acceptance, archive.final_epsilon,
                archive.wall_time)
    return archive


def _run_chain_job(args):
    table, design, config, chain_id = args
    return run_chain(table, design, config, chain_id=chain_id)


def run_parallel_chains(table: CountTable, design: ExperimentDesign,
                        config: ModelConfig, jobs: int | None = None,
                        ) -> list[PosteriorArchive]:
    """Independent chains on split streams; failures do not abort siblings."""
    config = config.resolved(table.n_samples, table.n_taxa)
    n_chains = config.n_chains
    if jobs is None:
        jobs = min(n_chains, os.cpu_count() or 1)
    job_args = [(table, design, config, c) for c in range(n_chains)]

    results: list[PosteriorArchive | None] = [None] * n_chains
    failures: list[tuple[int, str]] = []
    if jobs <= 1 or n_chains == 1:
        for c, args in enumerate(job_args):
            try:
                results[c] = _run_chain_job(args)
            except Exception as exc:  # noqa: BLE001 - collected and re-raised
                failures.append((c, str(exc)))
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {pool.submit(_run_chain_job, args): c
                       for c, args in enumerate(job_args)}
            for fut in concurrent.futures.as_completed(futures):
                c = futures[fut]
                try:
                    results[c] = fut.result()
                except Exception as exc:  # noqa: BLE001
                    failures.append((c, str(exc)))
    if failures:
        detail = "; ".join(f"chain {c}: {msg}" for c, msg in sorted(failures))
        raise EngineError(f"{len(failures)} chain(s) failed: {detail}")
    return results  # type: ignore[return-value]


def validate_run_inputs(table: CountTable, design: ExperimentDesign,
                        config: ModelConfig) -> None:
    if table.n_samples != design.n_samples:
        raise ValidationError("count table and design row counts differ")
    config.resolved(table.n_samples, table.n_taxa)
