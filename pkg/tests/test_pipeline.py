import dataclasses
import hashlib
import threading

import pytest

from vlmshap.gateway import MockEmbedder, MockVlm, value_of
from vlmshap.masking import (
    Coalition,
    FillSpec,
    MaskingStrategy,
    apply_masking,
    encode_png,
)
from vlmshap.pipeline import AttributionRun, attribute_scene, config_fingerprint
from vlmshap.sampling import SamplingPlan
from vlmshap.shapley import ESTIMATOR_EXACT, ESTIMATOR_MEAN_DIFF

from conftest import CountingVlm, build_scene
from oracles import mean_difference, permutation_shapley


def expected_values(scene, coalitions, strategy):
    """Recompute the coalition values the pipeline should have produced."""
    vlm = MockVlm(scene)
    embedder = MockEmbedder()
    reference = vlm.query(encode_png(apply_masking(scene, Coalition.full(scene.object_count), strategy)), scene.prompt)
    values = {}
    for c in coalitions:
        response = vlm.query(encode_png(apply_masking(scene, c, strategy)), scene.prompt)
        values[c] = value_of(reference, response, embedder)
    return values


@pytest.fixture
def scene():
    return build_scene(
        (16, 16),
        [
            ("lamp", (1, 1, 7, 9), (200, 30, 30)),
            ("book", (8, 2, 14, 6), (30, 200, 30)),
            ("mug", (3, 11, 9, 15), (30, 30, 200)),
        ],
    )


def run(scene, **kwargs):
    return attribute_scene(
        scene, MockVlm(scene), MockEmbedder(), **kwargs
    )


class TestAttributeScene:
    def test_full_coalition_scores_exactly_one(self, scene):
        out = run(scene)
        full = Coalition.full(3)
        record = next(r for r in out.records if r.coalition == full)
        assert record.value == 1.0
        assert record.response == out.reference_response

    def test_first_order_defaults(self, scene):
        vlm = CountingVlm(MockVlm(scene))
        out = attribute_scene(scene, vlm, MockEmbedder())
        assert out.result.estimator == ESTIMATOR_MEAN_DIFF
        assert out.result.samples_used == 4  # three leave-one-out + full
        assert vlm.calls == 4
        assert len(out.records) == 4

    def test_values_and_phi_match_reference(self, scene):
        strategy = MaskingStrategy("precise", FillSpec())
        plan = SamplingPlan(mode="exact")
        out = run(scene, strategy=strategy, plan=plan)
        coalitions = plan.coalitions(3)
        values = expected_values(scene, coalitions, strategy)
        for record in out.records:
            assert record.value == pytest.approx(values[record.coalition], abs=1e-12)
        game = {frozenset(c.ids()): v for c, v in values.items()}
        assert out.result.estimator == ESTIMATOR_EXACT
        assert list(out.result.phi) == pytest.approx(
            permutation_shapley(3, game), abs=1e-9
        )

    def test_mean_diff_matches_reference(self, scene):
        strategy = MaskingStrategy("bboa", FillSpec())
        out = run(scene, strategy=strategy)
        game = {
            frozenset(r.coalition.ids()): r.value for r in out.records
        }
        assert list(out.result.phi) == pytest.approx(
            mean_difference(3, game), abs=1e-12
        )

    def test_records_follow_plan_order(self, scene):
        plan = SamplingPlan(mode="exact")
        out = run(scene, plan=plan)
        assert [r.coalition for r in out.records] == plan.coalitions(3)
        for record in out.records:
            assert record.visible == record.coalition.ids()

    def test_parallelism_does_not_change_output(self, scene):
        plan = SamplingPlan(mode="exact")
        serial = run(scene, plan=plan, max_workers=1)
        threaded = run(scene, plan=plan, max_workers=8)
        a = dataclasses.replace(serial.result, elapsed_s=0.0)
        b = dataclasses.replace(threaded.result, elapsed_s=0.0)
        assert a == b
        assert serial.records == threaded.records
        assert serial.reference_response == threaded.reference_response

    def test_repeat_runs_identical(self, scene):
        a, b = run(scene), run(scene)
        assert a.result.phi == b.result.phi
        assert a.records == b.records

    def test_png_digests_match_rendered_images(self, scene):
        strategy = MaskingStrategy("bbox", FillSpec())
        out = run(scene, strategy=strategy)
        for record in out.records:
            png = encode_png(apply_masking(scene, record.coalition, strategy))
            assert record.png_sha256 == hashlib.sha256(png).hexdigest()

    def test_dump_writes_every_perturbation(self, scene, tmp_path):
        out = run(scene, dump_dir=tmp_path)
        files = {p.name for p in tmp_path.iterdir()}
        assert files == {r.png_name for r in out.records}
        for record in out.records:
            data = (tmp_path / record.png_name).read_bytes()
            assert hashlib.sha256(data).hexdigest() == record.png_sha256

    def test_dump_names_carry_scene_and_coalition(self, scene, tmp_path):
        run(scene, dump_dir=tmp_path)
        assert (tmp_path / "fixture_7.png").exists()  # full coalition of 3

    def test_worker_cap_defaults_to_endpoint_concurrency(self, scene):
        class CapCheckingVlm:
            model_id = "cap"

            class config:
                max_concurrent = 2

            def __init__(self):
                self.active = 0
                self.peak = 0
                self.lock = threading.Lock()
                self.inner = MockVlm(scene)

            def query(self, png, prompt):
                with self.lock:
                    self.active += 1
                    self.peak = max(self.peak, self.active)
                try:
                    return self.inner.query(png, prompt)
                finally:
                    with self.lock:
                        self.active -= 1

        vlm = CapCheckingVlm()
        attribute_scene(scene, vlm, MockEmbedder(), plan=SamplingPlan(mode="exact"))
        assert vlm.peak <= 2

    def test_query_failure_fails_the_run(self, scene):
        class FlakyVlm:
            model_id = "flaky"

            def __init__(self):
                self.calls = 0
                self.lock = threading.Lock()

            def query(self, png, prompt):
                with self.lock:
                    self.calls += 1
                    if self.calls == 3:
                        raise RuntimeError("midway failure")
                return MockVlm(scene).query(png, prompt)

        with pytest.raises(RuntimeError, match="midway failure"):
            attribute_scene(scene, FlakyVlm(), MockEmbedder(), max_workers=2)

    def test_run_bundle_types(self, scene):
        out = run(scene)
        assert isinstance(out, AttributionRun)
        assert out.scene is scene
        assert sorted(out.result.ranking) == [0, 1, 2]


class TestConfigFingerprint:
    def test_stable(self, scene):
        args = (scene, "vlm-a", "emb-a", MaskingStrategy(), SamplingPlan())
        assert config_fingerprint(*args) == config_fingerprint(*args)
        assert len(config_fingerprint(*args)) == 16

    def test_sensitive_to_each_knob(self, scene):
        base = config_fingerprint(
            scene, "vlm-a", "emb-a", MaskingStrategy(), SamplingPlan()
        )
        variants = [
            config_fingerprint(
                scene, "vlm-b", "emb-a", MaskingStrategy(), SamplingPlan()
            ),
            config_fingerprint(
                scene, "vlm-a", "emb-b", MaskingStrategy(), SamplingPlan()
            ),
            config_fingerprint(
                scene, "vlm-a", "emb-a", MaskingStrategy("precise"), SamplingPlan()
            ),
            config_fingerprint(
                scene,
                "vlm-a",
                "emb-a",
                MaskingStrategy(kind="bboa", fill=FillSpec.solid(0, 0, 0)),
                SamplingPlan(),
            ),
            config_fingerprint(
                scene, "vlm-a", "emb-a", MaskingStrategy(), SamplingPlan(mode="exact")
            ),
            config_fingerprint(
                scene, "vlm-a", "emb-a", MaskingStrategy(), SamplingPlan(seed=9)
            ),
        ]
        assert len({base, *variants}) == len(variants) + 1

    def test_reported_fingerprint_matches(self, scene):
        out = run(scene)
        assert out.result.config_fingerprint == config_fingerprint(
            scene, "mock-vlm", "mock-embed", MaskingStrategy(), SamplingPlan()
        )
