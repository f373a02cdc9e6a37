"""Regenerates the bundled scenario files under scenarios/."""
import json
import random
from pathlib import Path

OUT = Path(__file__).resolve().parent.parent / "scenarios"
MIX = [0.37, 0.14, 0.15, 0.10, 0.12, 0.04, 0.05, 0.03]


def fleet():
    small = [dict(id=f"jo32-{i}", model="orin-agx-32gb", fps_capacity=200, tops=200.0,
                  power_idle_w=22.4, power_per_fps_w=0.2) for i in range(1, 6)]
    large = [dict(id=f"jo64-{i}", model="orin-agx-64gb", fps_capacity=400, tops=275.0,
                  power_idle_w=25.9, power_per_fps_w=0.16) for i in range(1, 5)]
    return small + large


def grid_graph(rng, side=10, target=250):
    """Camera junctions on a side x side grid; grid segments are split by
    camera-less junctions until the graph has about `target` vertices."""
    vertices = [dict(id=f"J{r * side + c:03d}", camera=True, x=float(c), y=float(r))
                for r in range(side) for c in range(side)]
    links = []
    for r in range(side):
        for c in range(side):
            if c + 1 < side:
                links.append(((r, c), (r, c + 1)))
            if r + 1 < side:
                links.append(((r, c), (r + 1, c)))
    splits = {i: 0 for i in range(len(links))}
    budget = target - len(vertices)
    order = list(range(len(links)))
    rng.shuffle(order)
    k = 0
    while budget > 0:
        splits[order[k % len(order)]] += 1
        budget -= 1
        k += 1
    edges = []
    n = 0
    for i, (a, b) in enumerate(links):
        name = lambda p: f"J{p[0] * side + p[1]:03d}"
        chain = [name(a)]
        for s in range(splits[i]):
            t = (s + 1) / (splits[i] + 1)
            vid = f"R{n:03d}"
            n += 1
            vertices.append(dict(id=vid, camera=False,
                                 x=round(a[1] + t * (b[1] - a[1]), 3),
                                 y=round(a[0] + t * (b[0] - a[0]), 3)))
            chain.append(vid)
        chain.append(name(b))
        edges += [[chain[j], chain[j + 1]] for j in range(len(chain) - 1)]
    return dict(vertices=vertices, edges=edges)


def neighborhood100():
    rng = random.Random(20240611)
    graph = grid_graph(rng)
    cams = [v["id"] for v in graph["vertices"] if v["camera"]]
    streams = []
    for i, j in enumerate(cams):
        streams.append(dict(id=f"cam-{i:03d}", junction=j, fps=25, profile="arterial",
                            rate_scale=round(rng.uniform(0.75, 1.25), 3),
                            phase_s=round(rng.uniform(-20, 20), 1)))
    # rescale so the mean multiplier is exactly one
    mean = sum(s["rate_scale"] for s in streams) / len(streams)
    for s in streams:
        s["rate_scale"] = round(s["rate_scale"] / mean, 4)
    return dict(
        name="neighborhood100",
        seed=7,
        duration_s=900,
        profiles=dict(arterial=dict(
            base_rate_per_min=558.0,
            diurnal=dict(amplitude=0.19, period_s=900.0, phase_s=0.0),
            modulation=dict(sigma=0.06, corr_s=300.0),
            class_mix=MIX,
            dwell=dict(kind="geometric", mean_frames=12.0),
        )),
        streams=streams,
        devices=fleet(),
        road_graph=graph,
        intervals=dict(window_s=15, lateness_ms=2000, forecast_period_s=5, metrics_period_ms=1000),
        allocation=dict(weighting="multiplicity", endpoint="sum"),
        scheduler=dict(policy="bestfit", admission_queue=False),
        forecast=dict(model="graph_gru_lite", lag_minutes=5, horizon_minutes=5,
                      train_minutes=360, test_minutes=120),
        fl=fl_nine_clients(),
    )


def fl_nine_clients():
    clients = [dict(id=f"jo32-{i}", tier="32gb", streams=28, latency=dict(mean_s=6.3)) for i in range(1, 6)]
    clients += [dict(id=f"jo64-{i}", tier="64gb", streams=40, latency=dict(mean_s=4.0)) for i in range(1, 5)]
    return dict(seed=11, rounds=5, sampling=dict(window_s=20.0, duration_s=9000.0), clients=clients)


def powercal():
    ring = 32
    vertices = [dict(id=f"P{i:02d}", camera=True) for i in range(ring)]
    edges = [[f"P{i:02d}", f"P{(i + 1) % ring:02d}"] for i in range(ring)]
    return dict(
        name="powercal",
        seed=1,
        duration_s=60,
        profiles=dict(light=dict(base_rate_per_min=60.0, class_mix=MIX,
                                 dwell=dict(kind="fixed", frames=10))),
        streams=[dict(id=f"s{i:02d}", junction=f"P{i:02d}", fps=25, profile="light") for i in range(ring)],
        devices=fleet(),
        road_graph=dict(vertices=vertices, edges=edges),
        forecast=dict(lag_minutes=2, horizon_minutes=2, train_minutes=30, test_minutes=10),
    )


if __name__ == "__main__":
    for name, doc in [("neighborhood100", neighborhood100()), ("powercal", powercal())]:
        (OUT / f"{name}.json").write_text(json.dumps(doc, indent=1) + "\n")
        print(name, len(doc["road_graph"]["vertices"]), "vertices")
