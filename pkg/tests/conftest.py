import pytest

from sizegrad.model import parse_circuit

INV_LIB = '{"INV": [{"p": 10, "r": 2.0, "q": 2, "a": 1.0}, {"p": 8, "r": 1.0, "q": 4, "a": 2.0}]}'

# U1 at X1 drives U2 at X2 over n2 (R=2 kOhm, C=10 fF):
#   U1 = 10 + 2*(10 + 4) = 38, n2 = 2*(5 + 4) = 18, U2 = 8 + 1*0 = 8  -> 64 ps
CHAIN_CKT = """\
clock {clock}
port_in in
port_out out
gate U1 INV 0 1.0 1.0
gate U2 INV 1 3.0 1.0
net n1 in U1/A
net n2 U1/Y U2/A
net n3 U2/Y out
"""
CHAIN_SPF = "net n2 R=2.0 C=10.0\n"


@pytest.fixture
def chain():
    def make(clock=100.0):
        return parse_circuit(CHAIN_CKT.format(clock=clock), INV_LIB, CHAIN_SPF)
    return make
