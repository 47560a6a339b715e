"""Seeded synthetic claims generator.

Columns follow the OpenFEMA claim field names. The uncapped mean claim is
``coverage * exp(eta)`` where ``eta`` adds log-linear level effects for every
factor, numeric effects, and an optional rank-one flood-zone x basement
interaction ``strength * u[zone] * w[basement]``. Claims are gamma draws
around that mean, capped at the coverage amount.
"""

from __future__ import annotations

from dataclasses import dataclass

from scipy import stats

import numpy as np
import pandas as pd

from .data import Dataset, dataset_from_frame, nfip_schema

ZONES = (
    ["A", *(f"A{i:02d}" for i in range(31))]
    + ["A99", "A0B", "AE", "AH", "AHB", "AO", "AOB", "AR"]
    + ["B", "C", "D", "X", "V", "VE"]
    + [f"V{i:02d}" for i in range(1, 15)]
)
BASEMENT = ("0", "1", "2", "3", "4")
OCCUPANCY = ("1", "2", "3", "4")
FLOORS = ("1", "2", "3", "4")
PRIMARY = ("0", "1")


@dataclass
class SyntheticTruth:
    zone_effect: dict[str, float]
    zone_score: dict[str, float]
    basement_effect: dict[str, float]
    basement_score: dict[str, float]
    occupancy_effect: dict[str, float]
    floors_effect: dict[str, float]
    primary_effect: dict[str, float]
    interaction_strength: float
    mean: np.ndarray


def generate(
    n: int = 50_000,
    seed: int = 0,
    interaction: float = 0.6,
    zone_sd: float = 0.5,
    shape: float = 2.0,
    base: float = -1.6,
) -> tuple[pd.DataFrame, SyntheticTruth]:
    """Raw claims frame plus the planted effects."""
    rng = np.random.default_rng(seed)
    zones = np.array(ZONES)
    ranks = rng.permutation(len(zones)) + 1
    p_zone = ranks**-0.8
    p_zone /= p_zone.sum()

    zone_effect = rng.normal(0.0, zone_sd, len(zones))
    zone_score = rng.normal(0.0, 1.0, len(zones))
    basement_effect = np.array([0.0, 0.35, -0.25, 0.15, -0.4])
    basement_score = np.array([-1.0, 1.0, -0.5, 0.5, 0.0])
    occupancy_effect = np.array([0.0, 0.1, 0.3, 0.45])
    floors_effect = np.array([0.0, -0.15, -0.3, -0.2])
    primary_effect = np.array([-0.1, 0.1])

    z = rng.choice(len(zones), size=n, p=p_zone)
    b = rng.choice(len(BASEMENT), size=n, p=[0.45, 0.2, 0.15, 0.12, 0.08])
    o = rng.choice(len(OCCUPANCY), size=n, p=[0.7, 0.1, 0.1, 0.1])
    f = rng.choice(len(FLOORS), size=n, p=[0.5, 0.3, 0.15, 0.05])
    pr = rng.choice(2, size=n, p=[0.3, 0.7])
    coverage = np.clip(np.round(np.exp(rng.normal(np.log(120_000), 0.6, n)), -2), 10_000, 500_000)
    crs = rng.choice([0.0, 5.0, 10.0, 15.0, 20.0, 25.0], size=n, p=[0.4, 0.15, 0.15, 0.15, 0.1, 0.05])

    eta = (
        base
        + zone_effect[z]
        + basement_effect[b]
        + occupancy_effect[o]
        + floors_effect[f]
        + primary_effect[pr]
        + 0.02 * crs
        - 0.2 * (np.log(coverage) - np.log(120_000))
        + interaction * zone_score[z] * basement_score[b]
    )
    raw_mean = coverage * np.exp(eta)
    scale = raw_mean / shape
    y = np.minimum(rng.gamma(shape, scale), coverage)
    y = np.maximum(np.round(y, 2), 1.0)
    # E[min(G, c)] for G ~ Gamma(shape, scale)
    mean = raw_mean * stats.gamma.cdf(coverage, shape + 1, scale=scale) + coverage * stats.gamma.sf(coverage, shape, scale=scale)
    year = rng.integers(1995, 2023, n)

    frame = pd.DataFrame(
        {
            "yearOfLoss": year,
            "amountPaidOnBuildingClaim": y,
            "totalBuildingInsuranceCoverage": coverage,
            "communityRatingSystemDiscount": crs,
            "basementEnclosureCrawlspaceType": np.array(BASEMENT)[b],
            "occupancyType": np.array(OCCUPANCY)[o],
            "numberOfFloorsInTheInsuredBuilding": np.array(FLOORS)[f],
            "floodZone": zones[z],
            "primaryResidence": np.array(PRIMARY)[pr],
        }
    )
    truth = SyntheticTruth(
        zone_effect=dict(zip(ZONES, zone_effect)),
        zone_score=dict(zip(ZONES, zone_score)),
        basement_effect=dict(zip(BASEMENT, basement_effect)),
        basement_score=dict(zip(BASEMENT, basement_score)),
        occupancy_effect=dict(zip(OCCUPANCY, occupancy_effect)),
        floors_effect=dict(zip(FLOORS, floors_effect)),
        primary_effect=dict(zip(PRIMARY, primary_effect)),
        interaction_strength=interaction,
        mean=mean,
    )
    return frame, truth


def synthetic_dataset(n: int = 50_000, seed: int = 0, **kwargs) -> tuple[Dataset, SyntheticTruth]:
    frame, truth = generate(n, seed, **kwargs)
    return dataset_from_frame(frame, nfip_schema()), truth
