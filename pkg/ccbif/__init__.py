from ccbif.polysys import MassParams, PolySystem, build_ac, build_dziobek
from ccbif.interval import Box, KrawczykCertificate, certify, krawczyk
from ccbif.bifurcation import BifurcationCertificate, classify, ls_reduce

__all__ = [
    "MassParams",
    "PolySystem",
    "build_ac",
    "build_dziobek",
    "Box",
    "KrawczykCertificate",
    "certify",
    "krawczyk",
    "BifurcationCertificate",
    "classify",
    "ls_reduce",
]
__version__ = "0.1.0"
