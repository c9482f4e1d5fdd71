"""SDP relaxation of AC optimal power flow with Laplacian-weighted rank recovery."""

__version__ = "0.1.0"
