import pytest

from tempo_align import synth
from tempo_align.config import RunConfig

SMALL_SCENE = dict(n_clips=64, n_val=16, n_test=20, n_captioned=32)


def small_config(**kw) -> RunConfig:
    base = dict(
        seeds=[0], scene=SMALL_SCENE,
        pretrain=dict(epochs=3, warmup_epochs=1, batch_size=16),
        finetune=dict(epochs=3, warmup_epochs=1, batch_size=16),
    )
    base.update(kw)
    return RunConfig.from_dict(base)


@pytest.fixture(scope="session")
def small_data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("small_data")
    cfg = small_config()
    synth.generate(cfg.scene_spec(), root, cfg.fbank_config())
    return root


# acceptance bookkeeping: tests tagged @pytest.mark.criterion(n, "title")
_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    n, title = mark.args
    entry = _CRITERIA.setdefault(n, {"title": title, "ok": True, "detail": []})
    if rep.failed:
        entry["ok"] = False
    detail = getattr(item, "criterion_detail", None)
    if detail and rep.when == "call":
        entry["detail"].append(detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        extra = f"  ({'; '.join(e['detail'])})" if e["detail"] else ""
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if e['ok'] else 'FAIL'}: {e['title']}{extra}")
