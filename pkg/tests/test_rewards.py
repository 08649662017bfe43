import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spatialgrpo.rewards import (
    RewardConfig,
    compute_reward,
    consistency_penalty,
    resize_reward,
    rotation_error,
    rotation_reward,
    translation_reward,
)
from spatialgrpo.scene import (
    ANGLES,
    RATIOS,
    TASKS,
    Instruction,
    ObjectState,
    SceneSpec,
    apply_oracle_edit,
    encode_scene,
    make_examples,
    sample_scene,
)

CFG = RewardConfig()


def base_scene(active=3) -> SceneSpec:
    objs = [
        ObjectState(0, (0.5, 0.5), 0.6, (10.0, -20.0, 30.0), 0.1),
        ObjectState(1, (0.2, 0.8), 0.3, (0.0, 0.0, 0.0), 0.05),
        ObjectState(2, (0.8, 0.2), 0.7, (45.0, 0.0, -90.0), 0.15),
        ObjectState(3, (0.5, 0.5), 0.5, (0.0, 0.0, 0.0), 0.05),
        ObjectState(4, (0.5, 0.5), 0.5, (0.0, 0.0, 0.0), 0.05),
    ]
    return SceneSpec(tuple(objs), active, (0.1, 0.2, 0.3, 0.4))


def moved(scene, idx, **kw) -> SceneSpec:
    return scene.with_object(replace(scene.objects[idx], **kw))


def translate(direction, target=0):
    return Instruction("Translate", target, direction=direction)


def rotate(angle, rot_dir="counterclockwise", axis="z", target=0):
    return Instruction("Rotate", target, axis=axis, rot_dir=rot_dir, angle_deg=angle)


def resize(ratio, target=0):
    return Instruction("Resize", target, ratio=ratio)


# ------------------------------------------------------------ config


def test_config_defaults_and_validation():
    assert (CFG.background_tol, CFG.rotation_tol_deg, CFG.resize_tol) == (0.2, 20.0, 0.10)
    assert CFG.delta == 0.25
    with pytest.raises(ValueError):
        RewardConfig(lambda_id=0.0)
    with pytest.raises(ValueError):
        RewardConfig(background_tol=-1.0)


# ------------------------------------------------------------ translation


def test_translation_left_example():
    s = base_scene()
    bd = translation_reward(s, moved(s, 0, position=(0.25, 0.5)), translate("left"))
    assert bd.diagnostics["along"] == pytest.approx(0.25, abs=1e-12)
    assert bd.task_score == pytest.approx(1.0)
    assert bd.success and all(bd.criteria.values())
    assert bd.diagnostics["displacement"] == pytest.approx(0.25, abs=1e-12)


def test_translation_forward_uses_depth():
    s = base_scene()
    bd = translation_reward(s, moved(s, 0, depth=0.35), translate("forward"))
    assert bd.diagnostics["along"] == pytest.approx(0.25, abs=1e-12)
    assert bd.diagnostics["orth"] == 0.0
    assert bd.task_score == pytest.approx(1.0) and bd.success


def test_translation_no_op_fails_movement():
    s = base_scene()
    bd = translation_reward(s, s, translate("right"))
    assert bd.diagnostics["along"] == 0.0
    assert not bd.criteria["movement"] and not bd.success
    assert bd.task_score == 0.0


def test_translation_wrong_direction_scores_zero():
    s = base_scene()
    bd = translation_reward(s, moved(s, 0, position=(0.75, 0.5)), translate("left"))
    assert bd.task_score == 0.0 and not bd.success


def test_translation_orthogonal_component_is_penalized():
    s = base_scene()
    # along = 0.25, orth = 0.125 -> 1 - 0.5 * 0.5
    bd = translation_reward(s, moved(s, 0, position=(0.25, 0.625)), translate("left"))
    assert bd.task_score == pytest.approx(0.75, abs=1e-12)
    assert bd.criteria["movement"]


def test_translation_identity_penalty_from_orientation_change():
    s = base_scene()
    e = moved(s, 0, position=(0.25, 0.5), orientation=(10.0, -20.0, 120.0))
    bd = translation_reward(s, e, translate("left"))
    assert bd.identity_penalty > CFG.identity_tol
    assert not bd.criteria["identity"] and not bd.success


@pytest.mark.parametrize("active", [2, 3, 4, 5])
def test_moving_a_non_target_object_breaks_preservation(active):
    s = base_scene(active)
    # object 1 sits at (0.2, 0.8); shift both image coordinates by 0.5
    e = moved(moved(s, 0, position=(0.25, 0.5)), 1, position=(0.7, 0.3))
    bd = translation_reward(s, e, translate("left"))
    assert bd.criteria["movement"] and bd.criteria["identity"]
    assert bd.consistency_penalty > CFG.background_tol
    assert not bd.criteria["preservation"] and not bd.success


def test_task_mismatch_raises():
    s = base_scene()
    with pytest.raises(ValueError):
        translation_reward(s, s, resize(2.0))
    with pytest.raises(ValueError):
        rotation_reward(s, s, translate("left"))
    with pytest.raises(ValueError):
        resize_reward(s, s, rotate(90))


# ------------------------------------------------------------ rotation


def test_rotation_exact():
    s = base_scene()
    e = moved(s, 0, orientation=(10.0, -20.0, 120.0))
    bd = rotation_reward(s, e, rotate(90))
    assert bd.diagnostics["rot_err"] == pytest.approx(0.0, abs=1e-12)
    assert bd.task_score == pytest.approx(1.0) and bd.success


def test_rotation_thirty_degrees_short():
    s = base_scene()
    e = moved(s, 0, orientation=(10.0, -20.0, 90.0))
    bd = rotation_reward(s, e, rotate(90))
    assert bd.diagnostics["rot_err"] == pytest.approx(30 / 180, abs=1e-12)
    assert not bd.criteria["angle"] and not bd.success


def test_rotation_tolerance_is_inclusive():
    assert rotation_error(70.0, 90.0) * 180.0 == pytest.approx(20.0)
    s = base_scene()
    e = moved(s, 0, orientation=(10.0, -20.0, 110.0))  # achieved +80, 10 deg short
    assert rotation_reward(s, e, rotate(90)).criteria["angle"]
    e = moved(s, 0, orientation=(10.0, -20.0, 100.0))  # achieved +70, exactly 20 short
    assert rotation_reward(s, e, rotate(90)).criteria["angle"]


def test_rotation_half_turn_wraps():
    assert rotation_error(180.0, -180.0) == 0.0
    assert rotation_error(-180.0, 180.0) == 0.0
    s = base_scene()
    e = moved(s, 0, orientation=(10.0, -20.0, -150.0))
    for rd in ("clockwise", "counterclockwise"):
        bd = rotation_reward(s, e, rotate(180, rd))
        assert bd.diagnostics["rot_err"] == pytest.approx(0.0, abs=1e-12) and bd.success


def test_rotation_uses_requested_axis():
    s = base_scene()
    e = moved(s, 0, orientation=(55.0, -20.0, 30.0))
    assert rotation_reward(s, e, rotate(45, axis="x")).success
    assert not rotation_reward(s, e, rotate(45, axis="y")).success


# ------------------------------------------------------------ resize


@pytest.mark.parametrize(
    "new_scale, err, ok",
    [(0.2, 0.0, True), (0.25, 0.25, False), (0.21, 0.05, True), (0.18, 0.10, True), (0.178, 0.11, False)],
)
def test_resize_examples(new_scale, err, ok):
    s = base_scene()
    bd = resize_reward(s, moved(s, 0, scale=new_scale), resize(2.0))
    assert bd.diagnostics["scale_err"] == pytest.approx(err, abs=1e-12)
    assert bd.task_score == pytest.approx(1.0 - err, abs=1e-12)
    assert bd.success is ok


def test_resize_score_floor():
    s = base_scene()
    bd = resize_reward(moved(s, 0, scale=0.05), moved(s, 0, scale=0.5), resize(1.25))
    assert bd.diagnostics["scale_err"] > 1.0 and bd.task_score == 0.0


def test_no_op_resize_error_is_at_least_a_fifth():
    # |1 - r| / r minimised over the ratio grid
    assert min(abs(1 - r) / r for r in RATIOS) == pytest.approx(0.2)
    s = base_scene()
    for r in RATIOS:
        bd = resize_reward(s, s, resize(r))
        assert bd.diagnostics["scale_err"] >= 0.2 - 1e-12 and not bd.success


# ------------------------------------------------------------ penalties


def test_consistency_penalty_hand_value():
    s = base_scene(active=3)
    re = encode_scene(s)
    ee = re.copy()
    ee[1 * 10 + 0] += 0.3  # other object, one channel
    ee[-1] += 0.3  # background
    # two non-target objects plus background -> three entities
    assert consistency_penalty(re, ee, 0, 3) == pytest.approx(0.6 / 3)


def test_consistency_ignores_inactive_slots():
    s = base_scene(active=2)
    re = encode_scene(s)
    ee = re.copy()
    ee[3 * 10 : 4 * 10] += 5.0
    assert consistency_penalty(re, ee, 0, 2) == 0.0


def test_penalties_are_capped():
    s = base_scene()
    re = encode_scene(s)
    assert consistency_penalty(re, re + 10.0, 0, 3) == 1.0


# ------------------------------------------------------------ dispatcher and closure


def closure_corpus(task, n=1000):
    return make_examples(range(n), 1, task, with_targets=True)


@pytest.mark.parametrize("task", TASKS)
def test_oracle_closure_on_1000_pairs(task):
    bad_total = bad_success = noop_success = 0
    for ex in closure_corpus(task):
        bd = compute_reward(ex.scene, ex.target, ex.instruction)
        bad_total += abs(bd.total - 1.0) > 1e-9
        bad_success += not bd.success
        assert bd.identity_penalty == pytest.approx(0.0, abs=1e-9)
        assert bd.consistency_penalty == pytest.approx(0.0, abs=1e-9)
        noop_success += compute_reward(ex.scene, ex.scene, ex.instruction).success
    assert (bad_total, bad_success, noop_success) == (0, 0, 0)


def test_dispatch_matches_task_functions():
    s = base_scene()
    for instr, fn in [(translate("up"), translation_reward), (rotate(45), rotation_reward), (resize(1.5), resize_reward)]:
        e = apply_oracle_edit(s, instr)
        assert compute_reward(s, e, instr).to_dict() == fn(s, e, instr).to_dict()


def test_breakdown_serializes_all_fields():
    s = base_scene()
    d = compute_reward(s, s, translate("up")).to_dict()
    assert set(d) == {"task", "task_score", "identity_penalty", "consistency_penalty", "total", "success", "criteria", "diagnostics"}
    assert set(d["criteria"]) == {"movement", "identity", "preservation", "no_duplication"}


# ------------------------------------------------------------ properties

unit = st.floats(0.05, 0.95)


def random_edit(seed):
    """A perturbed copy of a sampled scene: every slot and the background jitter."""
    rng = np.random.default_rng(seed)
    s = sample_scene(seed)
    objs = []
    for o in s.objects:
        objs.append(
            replace(
                o,
                position=tuple(float(np.clip(p + rng.normal(0, 0.2), 0, 1)) for p in o.position),
                depth=float(np.clip(o.depth + rng.normal(0, 0.2), 0, 1)),
                orientation=tuple(float((a + rng.normal(0, 60) + 180) % 360 - 180) for a in o.orientation),
                scale=float(np.clip(o.scale * math.exp(rng.normal(0, 0.5)), 0.02, 0.2)),
            )
        )
    bg = tuple(float(np.clip(b + rng.normal(0, 0.2), 0, 1)) for b in s.background)
    return s, SceneSpec(tuple(objs), s.active_count, bg)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from(TASKS))
def test_total_is_bounded_and_decomposes(seed, task):
    s, e = random_edit(seed)
    instr = make_examples([seed], 1, task)[0].instruction
    bd = compute_reward(s, e, instr)
    assert 0.0 <= bd.task_score <= 1.0
    assert -(CFG.lambda_id + CFG.lambda_bg) <= bd.total <= 1.0
    assert bd.total == pytest.approx(bd.task_score - CFG.lambda_id * bd.identity_penalty - CFG.lambda_bg * bd.consistency_penalty)
    assert bd.success == all(bd.criteria.values())
    if bd.success and task == "Rotate":
        assert bd.task_score >= 1 - 20 / 180 - 1e-12
    if bd.success and task == "Resize":
        assert bd.task_score >= 0.9 - 1e-12


@settings(max_examples=60, deadline=None)
@given(st.floats(0.0, 0.25), st.floats(0.0, 0.25), st.floats(0.0, 0.2), st.floats(0.0, 0.2))
def test_translation_monotone_in_along_and_orth(a1, a2, o1, o2):
    s = base_scene()
    (a1, a2), (o1, o2) = sorted((a1, a2)), sorted((o1, o2))

    def score(along, orth):
        return translation_reward(s, moved(s, 0, position=(0.5 + along, 0.5 + orth)), translate("right")).task_score

    assert score(a1, o1) <= score(a2, o1) + 1e-12
    assert score(a1, o1) >= score(a1, o2) - 1e-12


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(ANGLES), st.floats(-179.0, 179.0))
def test_rotation_direction_symmetry(angle, achieved):
    s = base_scene()
    ccw = rotation_reward(s, moved(s, 0, orientation=(10.0, -20.0, float((30 + achieved + 180) % 360 - 180))), rotate(angle))
    cw = rotation_reward(
        s, moved(s, 0, orientation=(10.0, -20.0, float((30 - achieved + 180) % 360 - 180))), rotate(angle, "clockwise")
    )
    assert ccw.diagnostics["rot_err"] == pytest.approx(cw.diagnostics["rot_err"], abs=1e-9)
