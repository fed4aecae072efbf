//! CLI (stub)
