import numpy as np
import pytest

from tacforge import mpm, scenario
from tacforge.scenario import ContactSequence, Phase, Pose
from tacforge.signals import MarkerSet, TrackedMarkers


def make_tracked(ref_positions, displacements, ratios=None, n_extra_ref=0):
    """Fully-matched TrackedMarkers from explicit positions/displacements."""
    ref_positions = np.asarray(ref_positions, dtype=float)
    displacements = np.asarray(displacements, dtype=float)
    n = len(ref_positions)
    if ratios is None:
        ratios = np.ones(n)
    idx = np.arange(n)
    return TrackedMarkers(
        ref_index=idx, cur_index=idx, displacement=displacements,
        radius_ratio=np.asarray(ratios, dtype=float),
        ref_position=ref_positions,
        unmatched_ref=np.arange(n, n + n_extra_ref),
        unmatched_cur=np.zeros(0, dtype=int),
        n_ref=n + n_extra_ref, n_cur=n)


def staircase_sequence(depths, indenter_id, point=(0.0, 0.0)):
    """Press through increasing depths then back up, settling at each stop."""
    x, y = point
    way = [(Pose(np.array([x, y, 0.0])), Phase.NORMAL_INC)]
    for d in depths:
        way.append((Pose(np.array([x, y, -d])), Phase.NORMAL_INC))
    for d in reversed(depths[:-1]):
        way.append((Pose(np.array([x, y, -d])), Phase.NORMAL_DEC))
    way.append((Pose(np.array([x, y, 0.0])), Phase.NORMAL_DEC))
    return ContactSequence(indenter_id, way, np.array([x, y]), 0.0,
                           float(max(depths)))


@pytest.fixture(scope="session")
def prism_press_curve():
    """Flat-prism staircase press 0.1..1.2 mm and back; settled frames.

    Returns (frames, settled) where settled maps (phase, depth) stops to
    their settled SimFrame.
    """
    depths = [round(0.1 * k, 1) for k in range(1, 13)]
    seq = staircase_sequence(depths, "prism")
    state = mpm.init_sim(mpm.MaterialParams(), mpm.MpmConfig(settle_steps=300),
                         scenario.get_indenter("prism"))
    frames = mpm.run_contact_sequence(state, seq, speed=40.0, frame_rate=150.0)
    settled = {}
    for fr in frames:
        # settled frames sit exactly on a waypoint depth
        for d in [0.0] + depths:
            if abs(fr.depth - d) < 1e-9:
                settled[(fr.phase, d)] = fr
    return frames, settled


@pytest.fixture(scope="session")
def sphere_press_frames():
    """Centered sphere press to 0.9 mm (no shear); frame list."""
    cfgt = scenario.TrajectoryConfig(depth_step=0.9, max_depth=0.9,
                                     shear_angle=0.0, shear_distance=1.0,
                                     speed=40.0, frame_rate=150.0)
    seq = scenario.generate_trajectory(cfgt, [[0.0, 0.0]], 1,
                                       indenter_id="sphere")[0]
    state = mpm.init_sim(mpm.MaterialParams(), mpm.MpmConfig(settle_steps=300),
                         scenario.get_indenter("sphere"))
    return mpm.run_contact_sequence(state, seq, speed=40.0, frame_rate=150.0)
