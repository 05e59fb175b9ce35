import io
import json

import numpy as np
import pytest

from iakrec.checkpoint import load_checkpoint, save_checkpoint
from iakrec.iak import IAKAdapter, IAKConfig, adapted_prediction
from iakrec.models import FeatureSpace, ModelConfig, build_model
from iakrec.router import (
    DomainRouter,
    RequestError,
    ScoreRequest,
    adapters_from_arrays,
    encode_request,
    request_from_json,
    route_score,
    serve,
)

SPACE = FeatureSpace(n_users=30, n_items=20, n_scenes=2, n_regions=2, n_periods=3)


def _backbone(seed=0):
    return build_model(ModelConfig(kind="base", hidden_sizes=(10, 5)), SPACE, seed=seed)


def _adapter(backbone, period, seed, nudge=0.0):
    cfg = IAKConfig(d_e=4, decoder_hidden=(6,))
    adapter = IAKAdapter(backbone.rep_dim, backbone.n_heads, cfg, {"period": period}, seed=seed)
    if nudge:
        adapter.decoder_out.w.data[:] = nudge
        adapter.decoder_out.b.data[:] = nudge
    return adapter


@pytest.fixture
def router():
    backbone = _backbone()
    adapters = {
        "period=0": _adapter(backbone, 0, seed=1, nudge=0.05),
        "period=1": _adapter(backbone, 1, seed=2, nudge=-0.08),
    }
    return DomainRouter(backbone, adapters)


def _request(period=1, scene=0, region=1, user=3, item=4):
    return ScoreRequest(
        user_id=user, item_id=item,
        domain_ids={"scene": scene, "region": region, "period": period},
        feature_ids=[1, 2, 3, 4],
    )


class TestRouteScore:
    def test_selected_equals_standalone_adapter_bit_exact(self, router):
        req = _request(period=1)
        resp = route_score(router, req)
        assert resp.served_by == "period=1"
        batch = encode_request(req, SPACE)
        pred, _ = adapted_prediction(router.backbone, router.adapters["period=1"], batch, mode="mean")
        assert resp.p_ctr == float(pred.p_ctr.data[0, 0])
        assert resp.p_ctcvr == float(pred.p_ctcvr.data[0, 0])

    def test_non_selected_adapter_perturbation_is_invisible(self, router):
        req = _request(period=0)
        before = route_score(router, req)
        for p in router.adapters["period=1"].parameters():
            p.data += 3.0
        after = route_score(router, req)
        assert (before.p_ctr, before.p_ctcvr) == (after.p_ctr, after.p_ctcvr)

    def test_unknown_domain_falls_back_to_zero_shot(self, router):
        req = _request(period=2)
        resp = route_score(router, req)
        assert resp.served_by == "zero_shot"
        pred = router.backbone.predict(encode_request(req, SPACE))
        assert resp.p_ctr == float(pred.p_ctr.data[0, 0])

    def test_lazy_activation_parity(self):
        backbone = _backbone(seed=3)
        adapters = {
            "period=0": _adapter(backbone, 0, seed=4, nudge=0.1),
            "period=1": _adapter(backbone, 1, seed=5, nudge=0.2),
        }
        eager = DomainRouter(backbone, dict(adapters))
        lazy = DomainRouter(backbone, dict(adapters), lazy_activation=True)
        for period in (0, 1, 2):
            a = route_score(eager, _request(period=period))
            b = route_score(lazy, _request(period=period))
            assert (a.p_ctr, a.p_ctcvr, a.served_by) == (b.p_ctr, b.p_ctcvr, b.served_by)

    def test_most_specific_key_wins(self):
        backbone = _backbone(seed=6)
        broad = _adapter(backbone, 1, seed=7, nudge=0.1)
        narrow = IAKAdapter(
            backbone.rep_dim, backbone.n_heads, IAKConfig(d_e=4, decoder_hidden=(6,)),
            {"period": 1, "scene": 0}, seed=8,
        )
        narrow.decoder_out.w.data[:] = -0.3
        router = DomainRouter(backbone, {"period=1": broad, "period=1,scene=0": narrow})
        resp = route_score(router, _request(period=1, scene=0))
        assert resp.served_by == "period=1,scene=0"
        resp2 = route_score(router, _request(period=1, scene=1))
        assert resp2.served_by == "period=1"

    def test_dimension_mismatch_rejected(self):
        backbone = _backbone()
        bad = IAKAdapter(backbone.rep_dim + 2, 2, IAKConfig(d_e=4), {"period": 0}, seed=0)
        with pytest.raises(RequestError):
            DomainRouter(backbone, {"period=0": bad})

    def test_statelessness_under_permutation(self, router):
        reqs = [_request(period=p, user=u) for p in (0, 1, 2) for u in (1, 2, 3)]
        fwd = [route_score(router, r) for r in reqs]
        rev = [route_score(router, r) for r in reversed(reqs)]
        for a, b in zip(fwd, reversed(rev)):
            assert (a.p_ctr, a.p_ctcvr, a.served_by) == (b.p_ctr, b.p_ctcvr, b.served_by)


class TestRequestParsing:
    def test_valid_request(self):
        obj = json.loads('{"user_id": 1, "item_id": 2, "domain_ids": {"scene": 0}, "feature_ids": [1]}')
        req = request_from_json(obj)
        assert req.user_id == 1 and req.domain_ids == {"scene": 0}

    @pytest.mark.parametrize(
        "payload",
        [
            '{"user_id": 1}',
            '{"user_id": "x", "item_id": 2, "domain_ids": {}, "feature_ids": []}',
            '{"user_id": 1, "item_id": 2, "domain_ids": 3, "feature_ids": []}',
            "[1,2,3]",
        ],
    )
    def test_malformed_rejected(self, payload):
        with pytest.raises(RequestError):
            request_from_json(json.loads(payload))


class TestServe:
    def test_empty_stream_clean_exit(self, router):
        out = io.StringIO()
        assert serve(router, io.StringIO(""), out) == 0
        assert out.getvalue() == ""

    def test_three_lines_three_ordered_responses(self, router):
        lines = [
            json.dumps({"user_id": u, "item_id": 1, "domain_ids": {"scene": 0, "region": 0, "period": 1},
                        "feature_ids": [1, 2, 3, 4]})
            for u in (1, 2, 3)
        ]
        out = io.StringIO()
        assert serve(router, io.StringIO("\n".join(lines) + "\n"), out) == 0
        responses = [json.loads(l) for l in out.getvalue().splitlines()]
        assert len(responses) == 3
        expected = [route_score(router, request_from_json(json.loads(l))) for l in lines]
        for resp, exp in zip(responses, expected):
            assert resp["p_ctr"] == exp.p_ctr
            assert resp["p_ctcvr"] == exp.p_ctcvr
            assert resp["served_by"] == exp.served_by
            assert "latency_micros" in resp

    def test_malformed_line_reports_number_and_continues(self, router):
        good = json.dumps({"user_id": 1, "item_id": 1, "domain_ids": {"period": 0}, "feature_ids": []})
        out = io.StringIO()
        serve(router, io.StringIO("{broken\n" + good + "\n"), out)
        lines = [json.loads(l) for l in out.getvalue().splitlines()]
        assert lines[0]["line"] == 1 and "error" in lines[0]
        assert "p_ctr" in lines[1]

    def test_offline_online_parity(self, router):
        rng = np.random.default_rng(0)
        reqs = []
        for _ in range(200):
            reqs.append(
                {
                    "user_id": int(rng.integers(0, 35)),
                    "item_id": int(rng.integers(0, 25)),
                    "domain_ids": {"scene": int(rng.integers(0, 2)), "region": int(rng.integers(0, 2)),
                                   "period": int(rng.integers(0, 4))},
                    "feature_ids": [int(x) for x in rng.integers(0, 8, size=4)],
                }
            )
        stream = "\n".join(json.dumps(r) for r in reqs) + "\n"
        out = io.StringIO()
        serve(router, io.StringIO(stream), out)
        responses = [json.loads(l) for l in out.getvalue().splitlines()]
        for r, resp in zip(reqs, responses):
            offline = route_score(router, request_from_json(r))
            assert resp["p_ctr"] == offline.p_ctr
            assert resp["p_ctcvr"] == offline.p_ctcvr
            assert resp["served_by"] == offline.served_by


class TestCheckpointRoundTrip:
    def test_router_reloads_from_shared_container(self, router, tmp_path):
        params = dict(router.backbone.named_parameters())
        for a in router.adapters.values():
            params.update(a.named_parameters())
        path = tmp_path / "deploy.ckpt"
        save_checkpoint(path, params, "digest")
        arrays, _ = load_checkpoint(path)

        fresh_backbone = _backbone(seed=99)
        fresh_backbone.restore({k: v for k, v in arrays.items() if not k.startswith("adapter/")})
        adapters = adapters_from_arrays(arrays, fresh_backbone.rep_dim, fresh_backbone.n_heads,
                                        IAKConfig(d_e=4, decoder_hidden=(6,)))
        clone = DomainRouter(fresh_backbone, adapters)
        for period in (0, 1, 2):
            a = route_score(router, _request(period=period))
            b = route_score(clone, _request(period=period))
            assert (a.p_ctr, a.p_ctcvr, a.served_by) == (b.p_ctr, b.p_ctcvr, b.served_by)
