"""
Tests for the finite-difference gradient suite over the fusion blocks
"""

import dataclasses

import pytest

from config import PipelineConfig
from model import numerics
from model.grad_suite import GRAD_TOLERANCE, SUITE_KEYS, build_checks, run_grad_suite, suite_passed, tiny_config


@pytest.fixture(scope="module")
def report():
    return run_grad_suite(PipelineConfig())


class TestTinyConfig:
    def test_shapes_shrink(self):
        tiny = tiny_config(PipelineConfig())
        assert tiny.gcfat.embed_dim == tiny.sffa.embed_dim == tiny.voxel.bev_out_dim == 8
        assert tuple(tiny.gcfat.fusion_hw) == (4, 4)
        assert tiny.validate() is tiny

    def test_switches_survive(self):
        cfg = PipelineConfig()
        cfg.sffa = dataclasses.replace(cfg.sffa, enabled=False)
        cfg.vga = dataclasses.replace(cfg.vga, gate_mode="roi")
        tiny = tiny_config(cfg)
        assert tiny.sffa.enabled is False and tiny.vga.gate_mode == "roi"

    def test_leaves_input_alone(self):
        cfg = PipelineConfig()
        tiny_config(cfg)
        assert cfg.gcfat.embed_dim == 32


class TestSuite:
    def test_every_block_reported(self, report):
        assert tuple(report) == SUITE_KEYS
        assert all(report[key] for key in SUITE_KEYS)

    def test_passes(self, report):
        worst = {key: max(block.values()) for key, block in report.items()}
        assert suite_passed(report), worst
        assert all(err < GRAD_TOLERANCE for err in worst.values())

    def test_composed_covers_every_stage(self, report):
        names = set(report["composed"])
        for prefix in ("gcfat.", "sffa.", "vga.", "refine."):
            assert any(n.startswith(prefix) for n in names), prefix

    def test_checks_are_scalar(self):
        for fn, params in build_checks(PipelineConfig()).values():
            assert fn(params).shape == ()


class TestNegativeControl:
    def test_wrong_gate_rule_fails_vga(self, monkeypatch):
        def wrong_sigmoid(g, node):
            s = node.out.data
            return (g * s,)

        monkeypatch.setitem(numerics.BACKWARD_RULES, "sigmoid", wrong_sigmoid)
        report = run_grad_suite(PipelineConfig())
        assert not suite_passed(report)
        assert max(report["vga"].values()) > 1e-3

    def test_wrong_attention_rule_fails_gda(self, monkeypatch):
        def wrong_softmax(g, node):
            return (g * node.out.data,)

        monkeypatch.setitem(numerics.BACKWARD_RULES, "softmax", wrong_softmax)
        report = run_grad_suite(PipelineConfig())
        assert not suite_passed(report)
        assert max(report["gda"].values()) > 1e-3


def test_suite_passed_threshold():
    assert suite_passed({"a": {"w": 5e-5}, "b": {}})
    assert not suite_passed({"a": {"w": 5e-5, "v": 2e-4}})
    assert suite_passed({"a": {"v": 2e-4}}, tolerance=1e-3)
