import numpy as np
import pytest
import torch

from multidistill.backbone import BackboneConfig
from multidistill.cache import cache_features, make_synthetic_teacher
from multidistill.data import make_corpus
from multidistill.translators import TeacherSpec

torch.set_num_threads(1)


def finite_difference_check(loss_fn, params, n_checks, rng, h=1e-4):
    """Compare autograd gradients with central differences on randomly chosen entries.

    Returns a list of (analytic, numeric) pairs.
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    flat = [(i, j) for i, p in enumerate(params) for j in range(p.numel())]
    picks = rng.choice(len(flat), size=min(n_checks, len(flat)), replace=False)
    pairs = []
    with torch.no_grad():
        for k in picks:
            i, j = flat[k]
            view = params[i].view(-1)
            orig = view[j].item()
            view[j] = orig + h
            up = loss_fn().item()
            view[j] = orig - h
            down = loss_fn().item()
            view[j] = orig
            pairs.append((params[i].grad.view(-1)[j].item(), (up - down) / (2 * h)))
    return pairs


def max_rel_error(pairs, floor=1e-6):
    return max(abs(a - n) / max(abs(a), abs(n), floor) for a, n in pairs)


@pytest.fixture
def micro_config():
    return BackboneConfig(image_size=4, patch_size=2, embed_dim=8, depth=1, heads=2, num_register_tokens=1)


@pytest.fixture
def tiny_config():
    return BackboneConfig(image_size=8, patch_size=2, embed_dim=16, depth=1, heads=2, num_register_tokens=1)


@pytest.fixture
def small_config():
    # deep enough that the CNN translators stay smaller than the backbone
    return BackboneConfig(image_size=8, patch_size=2, embed_dim=16, depth=3, heads=2, num_register_tokens=1)


@pytest.fixture
def tiny_dataset():
    return make_corpus(24, 8, seed=0)


@pytest.fixture
def tiny_teachers():
    return [
        make_synthetic_teacher("patch-linear", TeacherSpec("alpha", 4, 6), seed=1),
        make_synthetic_teacher("lowpass", TeacherSpec("beta", 4, 5), seed=2),
    ]


@pytest.fixture
def tiny_cache(tmp_path, tiny_dataset, tiny_teachers):
    return cache_features(tiny_dataset, tiny_teachers, tmp_path / "cache", shard_size=10)


def pytest_terminal_summary(terminalreporter):
    reports = [r for key in ("passed", "failed") for r in terminalreporter.stats.get(key, [])]
    lines = []
    for r in reports:
        if r.when != "call" or "test_acceptance" not in r.nodeid:
            continue
        props = dict(r.user_properties)
        if "criterion" in props:
            lines.append((props["criterion"], "PASS" if r.passed else "FAIL", props.get("detail", "")))
    if lines:
        terminalreporter.section("acceptance criteria")
        for num, status, detail in sorted(lines, key=lambda x: x[0]):
            terminalreporter.write_line(f"criterion {num:>2}: {status}  {detail}")
