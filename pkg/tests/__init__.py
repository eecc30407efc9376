"""Unit and system tests for riskgraph; a package so pylint finds them."""
