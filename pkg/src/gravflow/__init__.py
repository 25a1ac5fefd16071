"""gravflow: physics-informed origin-destination flow reconstruction.

A gravity law with MLP-parameterized coefficients produces a physically
grounded base estimate for every candidate OD pair; an edge-enhanced graph
transformer refines it in log space. The package also ships the spatial
income segregation index that predicts cross-city transferability, a
flow-driven metapopulation SEIR simulator, and a synthetic-city generator
used as ground truth by the test suite.
"""

__version__ = "0.1.0"
