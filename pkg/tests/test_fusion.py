import copy

import numpy as np
import pytest

from voxeland.frames import (
    CameraIntrinsics,
    DepthImage,
    Frame,
    FrameRecord,
    Pose,
    PredictionInstance,
    encode_rle_mask,
)
from voxeland.fusion import (
    STAGE_ASSOCIATION,
    STAGE_INTEGRATION,
    STAGE_OPINIONS,
    STAGE_REFINEMENT,
    AssociationConfig,
    MergeEvent,
    Pipeline,
    associate,
    integrate_geometric,
    integrate_semantic,
    intersection_count,
    iou,
    ios,
    opinion_voxel_counts,
    refine,
)
from voxeland.opinions import UNKNOWN_CATEGORY, ClusteringParams, SubjectiveOpinion
from voxeland.voxelmap import UNKNOWN_INSTANCE_ID, MapState

VOXEL = 0.1
CFG = AssociationConfig()


def center(i, j=0, k=0):
    return np.array([(i + 0.5) * VOXEL, (j + 0.5) * VOXEL, (k + 0.5) * VOXEL])


def opinion(points, category="chair", confidence=0.9, frame=0):
    return SubjectiveOpinion(
        points=np.asarray(points, dtype=float),
        category=category,
        confidence=confidence,
        source_frame=frame,
        pixel_bbox=None if category == UNKNOWN_CATEGORY else (0, 0, 1, 1),
    )


def state_with_instance(n_voxels):
    """Map with one instance occupying voxels (0..n_voxels-1, 0, 0)."""
    state = MapState(voxel_size=VOXEL)
    instance_id = state.new_instance()
    for i in range(n_voxels):
        state.add_instance_evidence((i, 0, 0), instance_id, 1)
    return state, instance_id


class TestOverlapScores:
    def test_intersection_counts_points_not_voxels(self):
        state, instance_id = state_with_instance(8)
        # 6 points inside instance voxels (several sharing one voxel), 4 outside
        inside = [center(0), center(0), center(1), center(2), center(3), center(4)]
        outside = [center(50), center(51), center(52), center(53)]
        op = opinion(inside + outside)
        assert intersection_count(op, state.instances[instance_id], state) == 6

    def test_zero_footprint_instance(self):
        state, _ = state_with_instance(1)
        empty = state.new_instance()
        op = opinion([center(0)])
        assert intersection_count(op, state.instances[empty], state) == 0

    def test_all_points_inside_is_upper_bound(self):
        state, instance_id = state_with_instance(8)
        op = opinion([center(i % 8) for i in range(5)])
        assert intersection_count(op, state.instances[instance_id], state) == 5

    def test_worked_example_point_majority(self):
        state, instance_id = state_with_instance(8)
        inside = [center(0), center(0), center(1), center(2), center(3), center(4)]
        outside = [center(50), center(51), center(52), center(53)]
        op = opinion(inside + outside)
        record = state.instances[instance_id]
        assert iou(op, record, state) == 0.5
        assert ios(op, record, state) == 0.75

    def test_worked_example_partial_view(self):
        state, instance_id = state_with_instance(50)
        op = opinion([center(i) for i in range(7)])
        record = state.instances[instance_id]
        assert iou(op, record, state) == pytest.approx(0.14)
        assert ios(op, record, state) == 1.0

    def test_disjoint_is_zero(self):
        state, instance_id = state_with_instance(8)
        op = opinion([center(90), center(91)])
        record = state.instances[instance_id]
        assert iou(op, record, state) == 0.0
        assert ios(op, record, state) == 0.0

    def test_ios_dominates_iou_on_random_fixtures(self):
        rng = np.random.default_rng(13)
        for _ in range(300):
            state = MapState(voxel_size=VOXEL)
            instance_id = state.new_instance()
            for i in range(int(rng.integers(1, 30))):
                state.add_instance_evidence((i, 0, 0), instance_id, 1)
            points = [
                center(int(rng.integers(0, 40)), int(rng.integers(0, 2)))
                for _ in range(int(rng.integers(1, 40)))
            ]
            op = opinion(points)
            record = state.instances[instance_id]
            assert ios(op, record, state) >= iou(op, record, state)


class TestAssociate:
    def test_match_above_iou_threshold(self):
        state, instance_id = state_with_instance(8)
        inside = [center(0), center(0), center(1), center(2), center(3), center(4)]
        outside = [center(50), center(51), center(52), center(53)]
        outcome = associate([opinion(inside + outside)], state, CFG)
        assert outcome.matches == [(0, instance_id, 0.5, 0.75)]
        assert outcome.spawned == []

    def test_ios_rescues_partial_view(self):
        state, instance_id = state_with_instance(50)
        outcome = associate([opinion([center(i) for i in range(7)])], state, CFG)
        assert len(outcome.matches) == 1
        index, matched_id, got_iou, got_ios = outcome.matches[0]
        assert matched_id == instance_id
        assert got_iou == pytest.approx(0.14)
        assert got_ios == 1.0

    def test_spawn_when_both_thresholds_fail(self):
        # overlap 3 points, 10 points total, 23 instance voxels:
        # iou = 3/30 = 0.1, ios = 3/10 = 0.3
        state, instance_id = state_with_instance(23)
        points = [center(0), center(1), center(2)] + [center(100 + i) for i in range(7)]
        outcome = associate([opinion(points)], state, CFG)
        assert outcome.matches == []
        assert len(outcome.spawned) == 1
        assert outcome.spawned[0][0] == 0
        assert outcome.spawned[0][1] not in (UNKNOWN_INSTANCE_ID, instance_id)

    def test_unknown_goes_to_instance_zero(self):
        state, _ = state_with_instance(8)
        ops = [opinion([center(0)], category=UNKNOWN_CATEGORY)]
        outcome = associate(ops, state, CFG)
        assert outcome.matches[0][:2] == (0, UNKNOWN_INSTANCE_ID)

    def test_unknown_instance_never_candidate_for_semantic(self):
        state = MapState(voxel_size=VOXEL)
        for i in range(10):
            state.add_instance_evidence((i, 0, 0), UNKNOWN_INSTANCE_ID, 5)
        outcome = associate([opinion([center(i) for i in range(10)])], state, CFG)
        assert outcome.matches == []
        assert len(outcome.spawned) == 1

    def test_best_iou_wins_among_passing(self):
        state = MapState(voxel_size=VOXEL)
        a = state.new_instance()
        b = state.new_instance()
        for i in range(10):
            state.add_instance_evidence((i, 0, 0), a, 1)
        for i in range(10):
            state.add_instance_evidence((i, 1, 0), b, 1)
        # 8 points on a, 10 on b
        points = [center(i, 0) for i in range(8)] + [center(i, 1) for i in range(10)]
        outcome = associate([opinion(points)], state, CFG)
        assert len(outcome.matches) == 1
        assert outcome.matches[0][1] == b


class TestIntegrateGeometric:
    def test_points_in_one_voxel(self):
        state, instance_id = state_with_instance(1)
        before = state.cells[(0, 0, 0)].instance_counts[instance_id]
        integrate_geometric(opinion([center(0)] * 3), instance_id, state)
        assert state.cells[(0, 0, 0)].instance_counts[instance_id] == before + 3

    def test_point_mass_conserved_across_voxels(self):
        state = MapState(voxel_size=VOXEL)
        instance_id = state.new_instance()
        points = [center(0), center(1), center(1), center(2), center(3)]
        integrate_geometric(opinion(points), instance_id, state)
        total = sum(
            cell.instance_counts.get(instance_id, 0) for cell in state.cells.values()
        )
        assert total == len(points)
        assert state.instances[instance_id].voxel_count == 4

    def test_occupancy_hit_once_per_voxel(self):
        state = MapState(voxel_size=VOXEL)
        instance_id = state.new_instance()
        integrate_geometric(opinion([center(0)] * 10), instance_id, state)
        assert state.cells[(0, 0, 0)].log_odds == pytest.approx(
            state.occupancy.l_hit, abs=1e-12
        )

    def test_spawned_instance_expands_cells(self):
        state, existing = state_with_instance(1)
        fresh = state.new_instance()
        integrate_geometric(opinion([center(0)]), fresh, state)
        assert state.cells[(0, 0, 0)].instance_counts == {existing: 1, fresh: 1}


class TestIntegrateSemantic:
    def test_first_category(self):
        state, instance_id = state_with_instance(1)
        integrate_semantic(opinion([center(0)], "chair", 0.9), instance_id, state)
        assert state.instances[instance_id].category_evidence == {"chair": 0.9}
        assert "chair" in state.categories

    def test_accumulation(self):
        state, instance_id = state_with_instance(1)
        integrate_semantic(opinion([center(0)], "chair", 0.9), instance_id, state)
        integrate_semantic(opinion([center(0)], "chair", 0.8), instance_id, state)
        assert state.instances[instance_id].category_evidence["chair"] == pytest.approx(1.7)

    def test_category_expansion_probability(self):
        state, instance_id = state_with_instance(1)
        integrate_semantic(opinion([center(0)], "chair", 0.9), instance_id, state)
        integrate_semantic(opinion([center(0)], "chair", 0.8), instance_id, state)
        integrate_semantic(opinion([center(0)], "table", 0.6), instance_id, state)
        dist = state.instances[instance_id].category_distribution()
        assert dist["chair"] == pytest.approx(1.7 / 2.3)

    def test_unknown_instance_rejected(self):
        state = MapState(voxel_size=VOXEL)
        with pytest.raises(ValueError):
            integrate_semantic(opinion([center(0)], "chair", 0.9), UNKNOWN_INSTANCE_ID, state)

    def test_observation_log_appended(self):
        state, instance_id = state_with_instance(1)
        integrate_semantic(opinion([center(0)], "chair", 0.9, frame=7), instance_id, state)
        log = state.instances[instance_id].observations
        assert len(log) == 1
        assert log[0].frame_id == 7 and log[0].category == "chair"


def two_instance_state(footprint_a, footprint_b, beta_a=None, beta_b=None):
    state = MapState(voxel_size=VOXEL)
    a = state.new_instance()
    b = state.new_instance()
    for key in footprint_a:
        state.add_instance_evidence(key, a, 2)
    for key in footprint_b:
        state.add_instance_evidence(key, b, 3)
    state.instances[a].category_evidence = dict(beta_a or {"chair": 1.0})
    state.instances[b].category_evidence = dict(beta_b or {"chair": 0.5})
    for label in list(state.instances[a].category_evidence) + list(
        state.instances[b].category_evidence
    ):
        state.register_category(label)
    return state, a, b


class TestRefine:
    def test_identical_footprints_merge(self):
        keys = [(i, 0, 0) for i in range(5)]
        state, a, b = two_instance_state(keys, keys)
        events = refine(state, CFG)
        assert events == [MergeEvent(kept_id=a, retired_id=b, iou=1.0, ios=1.0)]
        assert b not in state.instances
        assert state.instances[a].voxel_count == 5
        assert state.cells[(0, 0, 0)].instance_counts == {a: 5}
        assert state.instances[a].category_evidence == {"chair": 1.5}
        state.audit_voxel_counts()

    def test_disjoint_instances_untouched(self):
        state, a, b = two_instance_state(
            [(i, 0, 0) for i in range(5)], [(i, 9, 0) for i in range(5)]
        )
        assert refine(state, CFG) == []
        assert a in state.instances and b in state.instances

    def test_chain_collapses_transitively(self):
        # A overlaps B, B overlaps C, A and C disjoint
        a_keys = [(i, 0, 0) for i in range(0, 10)]
        b_keys = [(i, 0, 0) for i in range(7, 17)]
        c_keys = [(i, 0, 0) for i in range(14, 24)]
        state = MapState(voxel_size=VOXEL)
        ids = [state.new_instance() for _ in range(3)]
        for keys, instance_id in zip((a_keys, b_keys, c_keys), ids):
            for key in keys:
                state.add_instance_evidence(key, instance_id, 1)
            state.instances[instance_id].category_evidence = {"chair": 1.0}
        # pairwise oracle: IoU(A,B) = 3/17 fails, IoS(A,B) = 0.3 fails at 0.7;
        # use looser thresholds so adjacent pairs pass and closure collapses all
        config = AssociationConfig(tau_iou=0.15, tau_ios=0.3, refine_every=30)
        events = refine(state, config)
        assert len(events) == 2
        assert set(state.instances) == {UNKNOWN_INSTANCE_ID, ids[0]}
        assert state.instances[ids[0]].voxel_count == 24
        state.audit_voxel_counts()

    def test_idempotent(self):
        keys = [(i, 0, 0) for i in range(5)]
        state, a, b = two_instance_state(keys, keys)
        assert len(refine(state, CFG)) == 1
        assert refine(state, CFG) == []

    def test_merge_preserves_evidence_totals(self):
        keys = [(i, 0, 0) for i in range(5)]
        state, a, b = two_instance_state(
            keys, keys, beta_a={"chair": 1.0, "table": 0.5}, beta_b={"table": 0.25}
        )
        alpha_total_before = sum(
            sum(c for i, c in cell.instance_counts.items() if i != UNKNOWN_INSTANCE_ID)
            for cell in state.cells.values()
        )
        beta_total_before = sum(
            sum(r.category_evidence.values()) for r in state.instances.values()
        )
        refine(state, CFG)
        alpha_total_after = sum(
            sum(c for i, c in cell.instance_counts.items() if i != UNKNOWN_INSTANCE_ID)
            for cell in state.cells.values()
        )
        beta_total_after = sum(
            sum(r.category_evidence.values()) for r in state.instances.values()
        )
        assert alpha_total_after == alpha_total_before
        assert beta_total_after == pytest.approx(beta_total_before)

    def test_unknown_never_merges(self):
        state = MapState(voxel_size=VOXEL)
        a = state.new_instance()
        for i in range(5):
            state.add_instance_evidence((i, 0, 0), a, 1)
            state.add_instance_evidence((i, 0, 0), UNKNOWN_INSTANCE_ID, 9)
        state.instances[a].category_evidence = {"chair": 1.0}
        assert refine(state, CFG) == []
        assert UNKNOWN_INSTANCE_ID in state.instances


class TestOpinionVoxelCounts:
    def test_counts_partition_points(self):
        rng = np.random.default_rng(3)
        points = rng.uniform(-1, 1, (500, 3))
        counts = opinion_voxel_counts(opinion(points), VOXEL)
        assert sum(counts.values()) == 500


def synthetic_frame(frame_id, predictions, depth_value=1500, shape=(40, 40)):
    height, width = shape
    depth = np.full(shape, depth_value, dtype=np.uint16)
    intr = CameraIntrinsics(
        fx=100.0, fy=100.0, cx=width / 2, cy=height / 2, width=width, height=height, depth_scale=0.001
    )
    record = FrameRecord(
        frame_id=frame_id,
        depth_path=None,
        predictions_path=None,
        pose=Pose(rotation=np.eye(3), translation=np.zeros(3)),
        intrinsics=intr,
    )
    return Frame(
        record=record,
        depth=DepthImage(width=width, height=height, values=depth),
        predictions=predictions,
    )


def block_mask(shape, rows, cols):
    mask = np.zeros(shape, dtype=bool)
    mask[rows[0] : rows[1], cols[0] : cols[1]] = True
    return mask


def make_pipeline(refine_every=30):
    state = MapState(voxel_size=0.02)
    clustering = ClusteringParams(coarse_voxel=0.08, eps=0.08 * 1.8, min_pts=4)
    return Pipeline(
        state,
        clustering=clustering,
        association=AssociationConfig(refine_every=refine_every),
    )


class TestProcessFrame:
    def test_empty_frame_only_increments_counter(self):
        pipeline = make_pipeline()
        empty = synthetic_frame(0, [], depth_value=0)
        pipeline.process_frame(empty)
        assert pipeline.state.frames_integrated == 1
        assert pipeline.state.cells == {}
        assert set(pipeline.state.instances) == {UNKNOWN_INSTANCE_ID}

    def test_cold_start_spawns_and_feeds_unknown(self):
        shape = (40, 40)
        predictions = [
            PredictionInstance("chair", 0.9, encode_rle_mask(block_mask(shape, (2, 14), (2, 14)))),
            PredictionInstance("table", 0.8, encode_rle_mask(block_mask(shape, (24, 36), (24, 36)))),
        ]
        pipeline = make_pipeline()
        outcome = pipeline.process_frame(synthetic_frame(0, predictions, shape=shape))
        assert len(outcome.spawned) == 2
        state = pipeline.state
        assert len(state.instances) == 3  # unknown + 2 spawned
        unknown_mass = sum(
            cell.instance_counts.get(UNKNOWN_INSTANCE_ID, 0) for cell in state.cells.values()
        )
        assert unknown_mass > 0
        categories = {
            label
            for record in state.instances.values()
            for label in record.category_evidence
        }
        assert {"chair", "table"} <= categories
        state.audit_voxel_counts()

    def test_replay_doubles_alpha_and_reassociates(self):
        shape = (40, 40)
        predictions = [
            PredictionInstance("chair", 0.9, encode_rle_mask(block_mask(shape, (2, 14), (2, 14)))),
        ]
        pipeline = make_pipeline()
        frame = synthetic_frame(0, predictions, shape=shape)
        first = pipeline.process_frame(frame)
        counts_after_first = {
            key: dict(cell.instance_counts) for key, cell in pipeline.state.cells.items()
        }
        second = pipeline.process_frame(copy.deepcopy(frame))
        assert len(first.spawned) == 1
        spawned_id = first.spawned[0][1]
        assert second.spawned == []
        matched = {instance_id for _, instance_id, _, _ in second.matches}
        assert matched == {spawned_id, UNKNOWN_INSTANCE_ID}
        for key, counts in counts_after_first.items():
            for instance_id, count in counts.items():
                assert pipeline.state.cells[key].instance_counts[instance_id] == 2 * count

    def test_refine_runs_on_schedule(self):
        pipeline = make_pipeline(refine_every=2)
        shape = (40, 40)
        predictions = [
            PredictionInstance("chair", 0.9, encode_rle_mask(block_mask(shape, (2, 14), (2, 14)))),
        ]
        pipeline.process_frame(synthetic_frame(0, predictions, shape=shape))
        assert pipeline.timer.counts[STAGE_REFINEMENT] == 0
        pipeline.process_frame(synthetic_frame(1, predictions, shape=shape))
        assert pipeline.timer.counts[STAGE_REFINEMENT] == 1

    def test_timer_reports_all_stages(self):
        pipeline = make_pipeline(refine_every=1)
        pipeline.process_frame(synthetic_frame(0, [], depth_value=1000))
        report = pipeline.timer.report()
        for stage in (STAGE_OPINIONS, STAGE_ASSOCIATION, STAGE_INTEGRATION, STAGE_REFINEMENT):
            assert stage in report["stages"]
        assert report["frames"] == 1
        assert report["frame_rate_hz"] > 0

    def test_determinism_byte_identical_snapshots(self, tmp_path):
        shape = (40, 40)

        def run(path):
            pipeline = make_pipeline(refine_every=2)
            for frame_id in range(4):
                predictions = [
                    PredictionInstance(
                        "chair", 0.9, encode_rle_mask(block_mask(shape, (2, 14), (2, 14)))
                    ),
                    PredictionInstance(
                        "table", 0.8, encode_rle_mask(block_mask(shape, (24, 36), (24, 36)))
                    ),
                ]
                pipeline.process_frame(synthetic_frame(frame_id, predictions, shape=shape))
            pipeline.state.save_snapshot(path)

        run(tmp_path / "a.json")
        run(tmp_path / "b.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
