import pytest

from nlmeimh.cli import simulate_dataset
from nlmeimh.config import build_obs_model, build_theta, load_config
from nlmeimh.streams import stream


def preset_problem(name, seed=0, theta_key="theta"):
    cfg = load_config(None, {"preset": name})
    theta = build_theta(cfg, cfg[theta_key])
    data = simulate_dataset(cfg, theta, stream(seed, "simulate"))
    return cfg, theta, build_obs_model(cfg), data


@pytest.fixture(scope="session")
def pk_mcmc():
    """PK replica at the MCMC-comparison parameter values (k_pop = 0.01)."""
    return preset_problem("warfarin-like-pk-mcmc")


@pytest.fixture(scope="session")
def pk_sim():
    return preset_problem("warfarin-like-pk")


@pytest.fixture(scope="session")
def tte():
    return preset_problem("weibull-tte")


def pytest_configure(config):
    config._criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    number, label = mark.args
    entry = item.config._criteria.setdefault(number, {"label": label, "ok": True, "details": []})
    entry["ok"] &= rep.passed
    entry["details"] += [str(v) for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    crit = getattr(config, "_criteria", {})
    if not crit:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(crit):
        c = crit[number]
        line = f"criterion {number}: {'PASS' if c['ok'] else 'FAIL'}  {c['label']}"
        if c["details"]:
            line += "  [" + "; ".join(c["details"]) + "]"
        terminalreporter.write_line(line)
