import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stcl.errors import GenerationError
from stcl.objectcorr import ANNOTATED, DISCOVERED
from stcl.synthvid import (ClipSpec, displacement, generate_clip, generate_proposals, ground_truth_correspondence,
                           read_clip, read_pgm, read_ppm, write_clip, write_pgm, write_ppm)

seeds = st.integers(0, 2 ** 31 - 1)


def test_generation_is_deterministic():
    spec = ClipSpec(texture_mode="textured")
    a, b = generate_clip(spec, 7), generate_clip(spec, 7)
    assert np.array_equal(a.frames, b.frames) and np.array_equal(a.masks, b.masks) and a.flow == b.flow
    assert not np.array_equal(a.frames, generate_clip(spec, 8).frames)


@settings(max_examples=25, deadline=None)
@given(seeds, st.sampled_from(["flat", "textured", "plain"]), st.booleans())
def test_frames_masks_and_flow_are_consistent(seed, texture, occlusion):
    spec = ClipSpec(texture_mode=texture, occlusion=occlusion)
    clip = generate_clip(spec, seed)
    assert clip.frames.shape == (6, 3, 64, 64) and clip.masks.shape == (6, 64, 64)
    assert clip.frames.min() >= 0 and clip.frames.max() <= 1
    assert np.array_equal(np.round(clip.frames * 255) / 255, clip.frames)
    assert set(np.unique(clip.masks)) <= set(range(spec.n_objects + 1))
    # first frame: all objects disjoint and fully visible
    for tr in clip.tracks:
        assert (clip.masks[0] == tr.object_id).sum() == tr.template.sum()
    for t in range(spec.T - 1):
        for tr in clip.tracks:
            dy, dx = clip.flow[t][tr.object_id]
            assert max(abs(dy), abs(dx)) <= spec.motion_range
            assert (tr.positions[t + 1][0] - tr.positions[t][0], tr.positions[t + 1][1] - tr.positions[t][1]) == (dy, dx)
    # every object pixel shows that object's appearance at the tracked position
    for t in range(spec.T):
        for tr in clip.tracks:
            y, x = tr.positions[t]
            h, w = tr.template.shape
            vis = clip.masks[t, y:y + h, x:x + w] == tr.object_id
            assert np.all(vis <= tr.template)
            got = clip.frames[t][:, y:y + h, x:x + w][:, vis]
            want = np.round(tr.appearance[:, vis] * 255) / 255
            assert np.array_equal(got, want)
    if not occlusion:
        assert not clip.occluded.any()


def test_static_clip():
    clip = generate_clip(ClipSpec(motion_range=0), 3)
    assert all(np.array_equal(clip.frames[0], f) for f in clip.frames)
    assert all(np.array_equal(clip.masks[0], m) for m in clip.masks)
    assert all(d == (0, 0) for rec in clip.flow for d in rec.values())


def test_object_histogram_matches_templates():
    clip = generate_clip(ClipSpec(occlusion=False), 11)
    counts = np.bincount(clip.masks[0].ravel(), minlength=4)
    assert [counts[tr.object_id] for tr in clip.tracks] == [int(tr.template.sum()) for tr in clip.tracks]
    assert counts.sum() == 64 * 64


def test_displacement_composes_flow():
    clip = generate_clip(ClipSpec(motion_range=3, T=6), 0)
    clip.flow = [{1: (0, 3)}, {1: (0, 3)}, {1: (1, -2)}, {1: (0, 0)}, {1: (0, 0)}]
    assert displacement(clip, 1, 0, 2) == (0, 6)
    assert displacement(clip, 1, 2, 0) == (0, -6)
    assert displacement(clip, 1, 0, 3) == (1, 4)
    assert displacement(clip, 1, 4, 4) == (0, 0)


@settings(max_examples=20, deadline=None)
@given(seeds, st.integers(0, 5), st.integers(0, 5))
def test_ground_truth_correspondence_lands_on_same_object(seed, t, t2):
    clip = generate_clip(ClipSpec(), seed)
    corr = ground_truth_correspondence(clip, t, t2)
    assert len(corr.src) == len(corr.dst)
    if len(corr):
        ids_src = clip.masks[t][corr.src[:, 0], corr.src[:, 1]]
        ids_dst = clip.masks[t2][corr.dst[:, 0], corr.dst[:, 1]]
        assert np.array_equal(ids_src, ids_dst) and ids_src.min() > 0
    if t == t2:
        assert np.array_equal(corr.src, corr.dst) and len(corr) == int((clip.masks[t] > 0).sum())


def test_generation_errors():
    with pytest.raises(GenerationError):
        generate_clip(ClipSpec(W=62), 0)
    with pytest.raises(GenerationError):
        generate_clip(ClipSpec(n_objects=9), 0)
    with pytest.raises(GenerationError):
        generate_clip(ClipSpec(texture_mode="noise"), 0)
    with pytest.raises(GenerationError):
        generate_clip(ClipSpec(W=16, H=16), 0)


def test_netpbm_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(3, 5, 7)) / 255.0
    write_ppm(tmp_path / "a.ppm", img)
    assert np.array_equal(read_ppm(tmp_path / "a.ppm"), img)
    mask = rng.integers(0, 9, size=(5, 7))
    write_pgm(tmp_path / "a.pgm", mask)
    assert np.array_equal(read_pgm(tmp_path / "a.pgm"), mask)
    with pytest.raises(ValueError):
        read_ppm(tmp_path / "a.pgm")
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "b.pgm", np.array([[300]]))


def test_clip_directory_round_trip(tmp_path):
    clip = generate_clip(ClipSpec(texture_mode="textured"), 5)
    generate_proposals(clip, seed=1)
    write_clip(clip, tmp_path / "c", proposal_seed=1)
    back = read_clip(tmp_path / "c")
    assert np.array_equal(back.frames, clip.frames) and np.array_equal(back.masks, clip.masks)
    assert back.flow == clip.flow and back.spec == clip.spec and back.clip_seed == clip.clip_seed
    assert [tr.positions for tr in back.tracks] == [tr.positions for tr in clip.tracks]
    assert [ps.proposals for ps in back.proposals] == [ps.proposals for ps in clip.proposals]


def test_proposals_without_jitter_or_distractors():
    clip = generate_clip(ClipSpec(), 2)
    sets = generate_proposals(clip, distractors_per_frame=0, jitter=0)
    for t, ps in enumerate(sets):
        ann = [p for p in ps.proposals if p.source == ANNOTATED]
        disc = [p for p in ps.proposals if p.source == DISCOVERED]
        visible = [tr for tr in clip.tracks if (clip.masks[t] == tr.object_id).any()]
        assert [p.object_id for p in ann] == [tr.object_id for tr in visible]
        assert all(p.object_id > 0 for p in disc)
        for p in ann:
            tr = clip.tracks[p.object_id - 1]
            assert p == tr.box(t)
        # an unjittered discovered copy coincides with its annotated box
        for p in disc:
            assert (p.x, p.y, p.w, p.h) == (lambda b: (b.x, b.y, b.w, b.h))(clip.tracks[p.object_id - 1].box(t))


def test_proposals_deterministic_and_filtered():
    clip = generate_clip(ClipSpec(), 4)
    a = generate_proposals(clip, seed=3)
    b = generate_proposals(clip, seed=3)
    assert [s.proposals for s in a] == [s.proposals for s in b]
    for ps in a:
        assert len(ps.cluster_ids) == len(ps.proposals)
