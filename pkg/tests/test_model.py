import pytest

from sizegrad import bench
from sizegrad.model import (CellLibrary, UnresolvedReferenceError, ValidationError, check_library,
                            emit_netlist, emit_parasitics, emit_sizing_changelist, parse_circuit,
                            parse_netlist, parse_parasitics, validate_graph)

from conftest import CHAIN_CKT, CHAIN_SPF, INV_LIB


def test_chain_parses(chain):
    graph, lib = chain()
    assert len(graph.gates) == 2
    internal = [n for n in graph.nets.values() if n.driver.owner in graph.gates and
                all(s.owner in graph.gates for s in n.sinks)]
    assert len(internal) == 1
    assert graph.depth() == 2
    assert graph.nets["n2"].r == 2.0 and graph.nets["n2"].c == 10.0


def test_library_monotone():
    lib = CellLibrary.from_json(INV_LIB)
    assert check_library(lib) == []
    assert lib.n_sizes("INV") == 2
    assert lib.variant("INV", 1).drive_resistance == 1.0


def test_unknown_cell_named():
    text = CHAIN_CKT.format(clock=100).replace("gate U2 INV", "gate U2 NAND9")
    with pytest.raises(UnresolvedReferenceError, match="NAND9"):
        parse_circuit(text, INV_LIB, CHAIN_SPF)


def test_validate_clean(chain):
    graph, lib = chain()
    assert validate_graph(graph, lib) == []


def test_multiple_drivers():
    text = CHAIN_CKT.format(clock=100) + "net n4 in U2/A\n"
    graph = parse_parasitics(CHAIN_SPF, parse_netlist(text))
    diags = validate_graph(graph, CellLibrary.from_json(INV_LIB))
    assert sum("multiple drivers" in d for d in diags) == 1


def test_non_monotone_table(chain):
    graph, _ = chain()
    bad = CellLibrary.from_json('{"INV": [{"p": 10, "r": 1.0, "q": 2, "a": 1}, '
                                '{"p": 8, "r": 2.0, "q": 4, "a": 2}]}')
    diags = validate_graph(graph, bad)
    assert sum("non-monotone size table" in d for d in diags) == 1
    with pytest.raises(ValidationError):
        parse_circuit(CHAIN_CKT.format(clock=100), bad.to_json(), CHAIN_SPF)


def test_changelist(chain):
    graph, _ = chain()
    a = {"U1": 0, "U2": 1}
    assert emit_sizing_changelist(a, a, graph) == ""
    assert emit_sizing_changelist(a, {"U1": 0, "U2": 0}, graph) == "U2 INV 1 -> 0\n"
    text = emit_sizing_changelist(a, {"U1": 1, "U2": 0}, graph)
    assert text.splitlines() == ["U1 INV 0 -> 1", "U2 INV 1 -> 0"]


def test_changelist_single_line():
    ckt = "clock 50\nport_in a\nport_out z\ngate U4 INV 1 0 0\nnet n1 a U4/A\nnet n2 U4/Y z\n"
    lib = ('{"INV": [{"p": 10, "r": 4, "q": 1, "a": 1}, {"p": 10, "r": 3, "q": 2, "a": 1},'
           ' {"p": 10, "r": 2, "q": 3, "a": 1}, {"p": 10, "r": 1, "q": 4, "a": 1}]}')
    graph, _ = parse_circuit(ckt, lib)
    assert emit_sizing_changelist({"U4": 1}, {"U4": 3}, graph) == "U4 INV 1 -> 3\n"


def test_roundtrip_generated():
    spec = bench.BenchSpec(seed=11, n_gates=(4, 20), suite_size=100)
    for circ in bench.generate_suite(spec):
        graph, lib = circ.parse()
        assert validate_graph(graph, lib) == []
        again, _ = parse_circuit(emit_netlist(graph), lib.to_json(), emit_parasitics(graph))
        assert again == graph
        assert emit_netlist(again) == emit_netlist(graph)
