"""Seedable, splittable random streams.

Every source of randomness in the package flows through an :class:`RngStream`,
identified by a 64-bit seed plus a (chain, site) pair.  The same
(seed, chain, site) triple always yields the same variate sequence, independent
of thread schedule or process layout, which is what makes chain execution and
the simulation harness bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1

# Update-site ids used by the engine; any small integer is a valid site.
SITE_INIT = 0
SITE_HMC = 1
SITE_GIBBS = 2
SITE_DATA = 3


@dataclass(frozen=True)
class RngStream:
    """Address of one deterministic random stream."""

    seed: int
    chain: int = 0
    site: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed & _MASK64,
                                    spawn_key=(self.chain, self.site))
        return np.random.Generator(np.random.PCG64(ss))


def stream_bundle(seed: int, chain: int, sites: dict[str, int] | None = None,
                  ) -> dict[str, np.random.Generator]:
    """Generators for the engine's named update sites of one chain."""
    if sites is None:
        sites = {"init": SITE_INIT, "hmc": SITE_HMC,
                 "gibbs": SITE_GIBBS, "data": SITE_DATA}
    return {name: RngStream(seed, chain, site).generator()
            for name, site in sites.items()}
