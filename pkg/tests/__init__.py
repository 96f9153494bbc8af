"""Tests for mvcache."""
