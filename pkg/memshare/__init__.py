#! /usr/bin/env python3.9
"""Memshare: a multi-tenant log-structured cache with a memory arbiter."""
