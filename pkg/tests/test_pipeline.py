import numpy as np
import pytest

from lfakit.clustering import purity
from lfakit.constraints import ConstraintConfig
from lfakit.manifest import ClipRecord, EmbeddingStore, FaceObservation, FilterDecision, ManifestError
from lfakit.pipeline import (PipelineConfig, clustering_samples, corpus_stats, filter_clip, run_cluster,
                             run_filter)
from lfakit.synth import GenConfig, generate_corpus


def test_filter_matches_planted_truth(small_corpus):
    decisions = run_filter(small_corpus.clips, small_corpus.faces, small_corpus.store)
    truth = {t["clip_id"]: t for t in small_corpus.truth}
    assert len(decisions) == len(truth)
    for d in decisions:
        assert d.accepted == truth[d.clip_id]["accepted"], d.clip_id
        assert d.reasons == truth[d.clip_id]["reasons"], d.clip_id


def test_generator_plants_every_reason(small_corpus):
    seen = {r for t in small_corpus.truth for r in t["reasons"]}
    assert {"FACE_COUNT", "FACE_PROPORTION", "POSE_DIVERSITY", "IDENTITY_CONSISTENCY"} <= seen


def test_filter_output_sorted_and_empty():
    assert run_filter([], [], None) == []
    clips = [ClipRecord(c, 10, 10, 3, 30.0) for c in ("b", "a")]
    assert [d.clip_id for d in run_filter(clips, [], None)] == ["a", "b"]


def _clip_with_rows(rows, n=3):
    clip = ClipRecord("c", 10, 10, n, 30.0)
    obs = [FaceObservation("c", i, (0, 0, 0.5, 0.5), 0.0, 40.0 * i, 0.0, r) for i, r in enumerate(rows)]
    return clip, obs


def test_identity_gate_inside_filter():
    store = EmbeddingStore(np.array([[1, 0], [1, 0], [0, 1]], dtype=np.float32))
    cfg = PipelineConfig(constraints=ConstraintConfig(sample_stride=1))
    clip, obs = _clip_with_rows([0, 1, 0])
    d = filter_clip(clip, obs, store, cfg)
    assert d.accepted and d.metrics["mean_similarity"] == 1.0
    clip, obs = _clip_with_rows([0, 2, 2])
    d = filter_clip(clip, obs, store, cfg)
    assert d.reasons == ["IDENTITY_CONSISTENCY"]


def test_single_embedding_is_missing_data():
    store = EmbeddingStore(np.eye(2, dtype=np.float32))
    cfg = PipelineConfig(constraints=ConstraintConfig(sample_stride=1))
    clip, obs = _clip_with_rows([0, None, None])
    assert filter_clip(clip, obs, store, cfg).reasons == ["MISSING_DATA"]


def test_row_out_of_range():
    store = EmbeddingStore(np.eye(2, dtype=np.float32))
    cfg = PipelineConfig(constraints=ConstraintConfig(sample_stride=1))
    clip, obs = _clip_with_rows([0, 1, 7])
    with pytest.raises(ManifestError, match="out of range"):
        filter_clip(clip, obs, store, cfg)


def test_cluster_accepted_clips_recovers_identities():
    corpus = generate_corpus(GenConfig(identities=4, clips_per=12, seed=3, dim=64))
    decisions = run_filter(corpus.clips, corpus.faces, corpus.store)
    accepted = {d.clip_id for d in decisions if d.accepted}
    cfg = PipelineConfig(m=8)
    samples = clustering_samples(corpus.clips, corpus.faces, corpus.store, accepted, cfg)
    assert samples.clip_ids == sorted(accepted)
    _, assignment = run_cluster(samples.vectors, cfg)
    ident = {t["clip_id"]: t["identity"] for t in corpus.truth}
    truth = {i: ident[c] for i, c in enumerate(samples.clip_ids)}
    assert purity(assignment, truth) == 1.0
    assert assignment.n_clusters == len(set(truth.values()))


def test_frame_granularity(small_corpus):
    decisions = run_filter(small_corpus.clips, small_corpus.faces, small_corpus.store)
    accepted = {d.clip_id for d in decisions if d.accepted}
    cfg = PipelineConfig(granularity="frame")
    s = clustering_samples(small_corpus.clips, small_corpus.faces, small_corpus.store, accepted, cfg)
    assert len(s.vectors) > len(accepted) and None not in s.frame_indices
    np.testing.assert_allclose(np.linalg.norm(s.vectors, axis=1), 1.0, atol=1e-6)


def test_run_cluster_single_and_empty():
    idx, a = run_cluster(np.zeros((0, 16), dtype=np.float32), PipelineConfig())
    assert idx is None and a.n_clusters == 0
    v = np.zeros((1, 16), dtype=np.float32)
    v[0, 0] = 1.0
    _, a = run_cluster(v, PipelineConfig())
    assert a.labels.tolist() == [0]


def test_stats_totals_conserved(small_corpus):
    decisions = run_filter(small_corpus.clips, small_corpus.faces, small_corpus.store)
    s = corpus_stats(decisions, [3, 3, 1])
    rejected = s["n_clips_in"] - s["n_clips_out"]
    assert sum(s["rejected_by_first_reason"].values()) == rejected
    assert sum(s["angle_variation_hist"].values()) == s["angle_variation_population"]
    assert s["n_samples_clustered"] == 7 and s["cluster_size_hist"] == {"1": 1, "3": 2}


def test_stats_buckets():
    ds = [FilterDecision("a", True, [], {"angle_variation_deg": 30.0}),
          FilterDecision("b", False, ["POSE_DIVERSITY"], {"angle_variation_deg": 29.9})]
    assert corpus_stats(ds)["angle_variation_hist"] == {"20-30": 1, "30-40": 1}


def test_bad_granularity():
    with pytest.raises(ValueError):
        PipelineConfig(granularity="scene")
