"""Turn assembly samples into model inputs and training examples."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .flow import ModelInputs, TrainExample
from .fracture import MAX_K, AssemblySample, augment, augment_rotations, choose_anchor
from .geom import allocate_budget
from .query import BANDS, BUDGET_FLOOR, LOCAL_K, QuerySet, condition_features, query_tokens, \
    sample_queries


@dataclass
class PreparedObject:
    """Queries, local tokens and query-level labels of one sample."""
    sample: AssemblySample
    qset: QuerySet
    z: np.ndarray
    fracture: np.ndarray

    @property
    def anchor_id(self) -> int:
        return self.qset.anchor_id

    def anchor_frame_targets(self) -> np.ndarray:
        """GT assembled queries expressed in the anchor fragment's frame.

        The anchor rows equal the anchor's input-frame queries exactly.
        """
        a = self.anchor_id
        T_inv = self.sample.gt_transforms[a].inverse()
        x0 = T_inv.apply(self.qset.flat_targets())
        fmap = self.qset.fragment_map
        x0[fmap == a] = self.qset.queries[a]
        return x0


def anchor_for(sample: AssemblySample, M: int) -> int:
    return choose_anchor(allocate_budget([f.area for f in sample.fragments], M, BUDGET_FLOOR))


def prepare(sample: AssemblySample, M: int, seed: int, k: int = LOCAL_K) -> PreparedObject:
    qset = sample_queries(sample, M, seed)
    z = query_tokens(sample, qset, k)
    fracture = np.concatenate([lab[idx] for lab, idx in zip(sample.fracture_labels, qset.indices)])
    return PreparedObject(sample, qset, z, fracture.astype(np.float64))


def part_permutation(K: int, rng: np.random.Generator, max_parts: int = MAX_K) -> np.ndarray:
    return rng.permutation(max_parts)[:K]


def model_inputs(prep: PreparedObject, part_index, bands: int = BANDS,
                 rotations: list[np.ndarray] | None = None) -> ModelInputs:
    """Inputs for the velocity network; ``rotations`` optionally re-poses each
    fragment's queries and normals (training-time augmentation)."""
    qs, ns = prep.qset.queries, prep.qset.normals
    if rotations is not None:
        qs = [q @ R.T for q, R in zip(qs, rotations)]
        ns = [n @ R.T for n, R in zip(ns, rotations)]
    feats = condition_features(prep.z, np.concatenate(qs), np.concatenate(ns), bands)
    return ModelInputs(torch.from_numpy(feats), prep.qset.fragment_map,
                       np.asarray(part_index, dtype=np.int64), prep.anchor_id)


def training_example(prep: PreparedObject, rng: np.random.Generator, bands: int = BANDS,
                     max_parts: int = MAX_K) -> TrainExample:
    """Freshly augmented view: random non-anchor rotations and part permutation.

    Equivalent to ``augment`` followed by query sampling with the same FPS
    picks, without recomputing tokens (they are rigid-invariant).
    """
    rots = augment_rotations(prep.sample.K, prep.anchor_id, rng)
    part_index = part_permutation(prep.sample.K, rng, max_parts)
    inputs = model_inputs(prep, part_index, bands, rots)
    return TrainExample(inputs, torch.from_numpy(prep.anchor_frame_targets()), prep.fracture,
                        np.asarray(prep.sample.adjacency))


@dataclass
class EvalView:
    """A deterministically augmented object as presented at inference."""
    prep: PreparedObject
    inputs: ModelInputs
    augment_seed: int

    @property
    def sample(self) -> AssemblySample:
        return self.prep.sample


def view_seeds(seed: int) -> tuple[int, int, int]:
    """Augmentation, query-sampling and part-index seeds of an evaluation view."""
    a, b, c = np.random.SeedSequence(seed).generate_state(3)
    return int(a), int(b), int(c)


def eval_sample(sample: AssemblySample, M: int, seed: int) -> tuple[AssemblySample, int]:
    """The augmented sample an evaluation view is built from, and its anchor."""
    anchor = anchor_for(sample, M)
    return augment(sample, anchor, view_seeds(seed)[0]), anchor


def eval_view(sample: AssemblySample, M: int, seed: int, bands: int = BANDS, k: int = LOCAL_K,
              max_parts: int = MAX_K) -> EvalView:
    """Augment with ``seed`` and build inputs; identical on every call."""
    augmented, _ = eval_sample(sample, M, seed)
    _, q_seed, p_seed = view_seeds(seed)
    prep = prepare(augmented, M, q_seed, k)
    part_index = part_permutation(sample.K, np.random.default_rng(p_seed), max_parts)
    return EvalView(prep, model_inputs(prep, part_index, bands), seed)
