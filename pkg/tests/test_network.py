import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmjoint.fixtures import build_toy_multimodal
from mmjoint.network import (
    Leg,
    MultiModalNetwork,
    NetworkStructureError,
    NetworkValidationError,
    Path,
    TransitLine,
    TransitStop,
    enumerate_counts,
    host_cell,
    load_network,
    path_mode_indicators,
    submode_label,
    validate,
    write_network,
)


def test_nguyen_dupuis_counts(nd):
    s = enumerate_counts(nd)
    assert (s.nodes, s.links, s.bus_lines, s.metro_lines, s.physical_stops) == (13, 19, 6, 3, 27)
    assert s.virtual_stops == 39
    assert s.stop_trip_pairs == 1170
    assert s.walk_links == 220
    assert (s.paths_driving, s.paths_transit, s.paths_pnr) == (25, 177, 84)
    assert s.parking_lots == 1
    assert s.od_pairs == 4


def test_shipped_bundle_validates(nd):
    assert validate(nd) == []


def test_empty_link_file_is_structural_error(nd_bundle):
    (nd_bundle / "links.tsv").write_text("id\tfrom_node\tto_node\n")
    with pytest.raises(NetworkStructureError):
        load_network(nd_bundle)


def test_dangling_link_reference_names_the_id(nd_bundle):
    text = (nd_bundle / "paths.tsv").read_text().splitlines()
    header, first = text[0], text[1]
    cols = header.split("\t")
    cells = first.split("\t")
    legs = cells[cols.index("legs")]
    cells[cols.index("legs")] = legs.replace("D:1|", "D:NOPE|", 1)
    text[1] = "\t".join(cells)
    (nd_bundle / "paths.tsv").write_text("\n".join(text) + "\n")
    with pytest.raises((NetworkStructureError, NetworkValidationError), match="NOPE"):
        load_network(nd_bundle)


def test_virtual_stop_without_parent_is_named(nd_bundle):
    stops = (nd_bundle / "stops.tsv").read_text()
    (nd_bundle / "stops.tsv").write_text(stops.replace("B1@1\tvirtual-bus\tPB1", "B1@1\tvirtual-bus\t-"))
    with pytest.raises(NetworkValidationError) as err:
        load_network(nd_bundle)
    assert any("B1@1" in f for f in err.value.failures)


def test_validation_lists_every_failure(nd_bundle):
    stops = (nd_bundle / "stops.tsv").read_text()
    stops = stops.replace("B1@1\tvirtual-bus\tPB1", "B1@1\tvirtual-bus\t-")
    stops = stops.replace("B1@5\tvirtual-bus\tPB5", "B1@5\tvirtual-bus\t-")
    (nd_bundle / "stops.tsv").write_text(stops)
    with pytest.raises(NetworkValidationError) as err:
        load_network(nd_bundle)
    text = "\n".join(err.value.failures)
    assert "B1@1" in text and "B1@5" in text


def test_round_trip_preserves_summary(nd, tmp_path):
    write_network(nd, tmp_path / "copy")
    again = load_network(tmp_path / "copy")
    assert enumerate_counts(again) == enumerate_counts(nd)
    assert [p.legs for p in again.paths] == [p.legs for p in nd.paths]


def test_round_trip_toy(tmp_path):
    net = build_toy_multimodal()
    write_network(net, tmp_path / "toy")
    assert enumerate_counts(load_network(tmp_path / "toy")) == enumerate_counts(net)


def _single_line_network(n_stops, n_trips):
    base = build_toy_multimodal()
    stops = {f"PS{i}": TransitStop(f"PS{i}", "physical-metro") for i in range(n_stops)}
    stops.update({f"VS{i}": TransitStop(f"VS{i}", "virtual-metro", f"PS{i}") for i in range(n_stops)})
    line = TransitLine("M", "metro", tuple(f"VS{i}" for i in range(n_stops)),
                       tuple(60.0 * j for j in range(n_trips)), 100.0, (), tuple([60.0] * (n_stops - 1)))
    car = [p for p in base.paths if p.submode == "car" and p.origin == "o1"]
    return MultiModalNetwork(base.links, stops, {}, {"M": line}, base.zones, {("o1", "d"): 19.0},
                             tuple(car), base.manifest)


def test_single_line_single_trip_pairs():
    assert enumerate_counts(_single_line_network(3, 1)).stop_trip_pairs == 3


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 6), st.integers(1, 5))
def test_stop_trip_pairs_is_stops_times_trips(n_stops, n_trips):
    assert enumerate_counts(_single_line_network(n_stops, n_trips)).stop_trip_pairs == n_stops * n_trips


def test_mode_indicators_examples():
    net = build_toy_multimodal()
    by_mode = {}
    for p in net.paths:
        by_mode.setdefault(p.submode, p)
    assert path_mode_indicators(by_mode["car"], net.lines) == (0, 0)
    assert path_mode_indicators(by_mode["bus+metro"], net.lines) == (1, 1)
    assert path_mode_indicators(by_mode["car+metro"], net.lines) == (0, 1)
    assert path_mode_indicators(by_mode["car+metro"]) == (0, 1)


def test_mode_labels_consistent_with_legs(nd):
    for p in nd.paths:
        has_car = any(leg.kind == "drive" for leg in p.legs)
        bus, metro = path_mode_indicators(p, nd.lines)
        assert submode_label(has_car, bus, metro) == p.submode


def test_boarding_lines_serve_their_stops(nd):
    for p in nd.paths:
        for leg in p.rides():
            stops = nd.lines[leg.ref].stops
            assert stops.index(leg.board) < stops.index(leg.alight)


def test_transit_only_paths_have_no_car_legs(nd):
    for p in nd.paths:
        if p.submode in ("bus", "metro", "bus+metro"):
            assert not any(leg.kind in ("drive", "park") for leg in p.legs)


def test_mixed_path_without_line_table_is_rejected():
    p = Path("x", "o", "d", "bus+metro", (Leg("ride", "B", "s1", "s2"), Leg("ride", "M", "s3", "s4")))
    with pytest.raises(ValueError):
        path_mode_indicators(p)


def test_host_cell_boundary_resolves_upstream():
    net = build_toy_multimodal()
    link = net.links["L1"]  # 0.6 mi at 30 mph, 5 s cells of 1/24 mi
    step = 5.0
    cell_len = link.speed_limit * step / 3600.0
    assert host_cell(link, cell_len, step) == 0
    assert host_cell(link, cell_len * 1.5, step) == 1
    assert host_cell(link, 0.0, step) == 0
