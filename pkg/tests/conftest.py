"""
Pytest configuration and shared fixtures
"""
import pytest
import os
import sys
from pathlib import Path

import numpy as np

# Add parent directory to path
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from app.services.instance import Instance, Node, generate_instance, load_instance  # noqa: E402
from app.services.solution import Solution  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"

@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES

@pytest.fixture
def make_instance():
    """Factory: CVRP instance from depot-first coordinates and demands"""
    def _make(coords, demands, capacity, name="fixture"):
        nodes = [Node(id=k, x=float(x), y=float(y), demand=int(q))
                 for k, ((x, y), q) in enumerate(zip(coords, demands))]
        return Instance(name=name, capacity=capacity, nodes=tuple(nodes))
    return _make

@pytest.fixture
def line5() -> Instance:
    """Depot at the origin and five unit customers 10 apart along the x axis, Q=30"""
    return load_instance(FIXTURES / "line5.vrp")

@pytest.fixture
def solomon_toy_text() -> str:
    return (FIXTURES / "solomon_toy.txt").read_text()

@pytest.fixture
def solomon_toy() -> Instance:
    """Three spokes of three customers each with staggered windows; feasible with 3 routes"""
    return load_instance(FIXTURES / "solomon_toy.txt")

@pytest.fixture
def small_instance() -> Instance:
    return generate_instance(seed=7, n=8, customer_dist="R", demand_profile="1-10")

@pytest.fixture
def medium_instance() -> Instance:
    return generate_instance(seed=3, n=40, customer_dist="RC", demand_profile="5-10")

@pytest.fixture
def tiny_instances():
    """Twenty seeded random instances with 5 to 8 customers"""
    rng = np.random.default_rng(2024)
    return [
        generate_instance(seed=s, n=int(rng.integers(5, 9)), customer_dist="R", demand_profile="1-10")
        for s in range(20)
    ]

@pytest.fixture
def ring_solution(make_instance) -> Solution:
    """22 customers on a circle split into 4 routes (26 distinct edges)"""
    angles = np.linspace(0, 2 * np.pi, 22, endpoint=False)
    coords = [(500, 500)] + [(500 + 300 * np.cos(a), 500 + 300 * np.sin(a)) for a in angles]
    instance = make_instance([(round(x), round(y)) for x, y in coords], [0] + [1] * 22, 10, name="ring22")
    routes = [list(range(1, 7)), list(range(7, 13)), list(range(13, 18)), list(range(18, 23))]
    return Solution(instance, routes)

@pytest.fixture
def x101_path() -> Path:
    path = FIXTURES / "X-n101-k25.vrp"
    if not path.exists():
        pytest.skip("X-n101-k25.vrp not available")
    return path
