"""Gradient verification harness: setup shape, suite results, reporting."""

import numpy as np

from viewsplat.gradcheck import (
    LOSS_NAMES,
    build_check_setup,
    format_report,
    run_gradient_suite,
)
from viewsplat.residual import PARAM_SPECS
from viewsplat.scene import PARAM_NAMES


def test_setup_is_tiny_and_jittered():
    scene, net = build_check_setup(seed=0)
    assert scene.num_gaussians == 2
    cam = scene.cameras[0]
    assert (cam.height, cam.width) == (8, 8)
    assert len(scene.cameras) == 4
    assert scene.train_indices == (1, 2, 3)
    # jitter moved the normals off their exact surface alignment
    norms = np.linalg.norm(scene.normals, axis=1)
    assert not np.allclose(norms, 1.0)
    # every network tensor carries signal
    for name, arr in net.weights.items():
        assert np.abs(arr).max() > 0, name


def test_setup_is_deterministic():
    a_scene, a_net = build_check_setup(seed=3)
    b_scene, b_net = build_check_setup(seed=3)
    for name in PARAM_NAMES:
        assert (getattr(a_scene, name) == getattr(b_scene, name)).all()
    for name in a_net.weights:
        assert (a_net.weights[name] == b_net.weights[name]).all()


def test_reduced_suite_all_groups_pass():
    rows = run_gradient_suite(seed=0, coords_per_group=2)
    assert len(rows) == len(LOSS_NAMES) * (len(PARAM_NAMES) + len(PARAM_SPECS))
    bad = [(r.loss, r.group, r.result.max_rel_error)
           for r in rows if not r.ok]
    assert bad == []


def test_suite_covers_every_loss_and_group():
    rows = run_gradient_suite(seed=1, coords_per_group=1)
    losses_seen = {r.loss for r in rows}
    groups_seen = {r.group for r in rows}
    assert losses_seen == set(LOSS_NAMES)
    assert set(PARAM_NAMES) <= groups_seen
    assert {name for name, _ in PARAM_SPECS} <= groups_seen


def test_format_report_mentions_every_row():
    rows = run_gradient_suite(seed=0, coords_per_group=1)
    text = format_report(rows)
    lines = text.strip().splitlines()
    assert len(lines) == len(rows) + 1  # one per row plus the summary
    assert "groups ok" in lines[-1]
    for r in rows[:5]:
        assert any(r.group in line and r.loss in line for line in lines)
