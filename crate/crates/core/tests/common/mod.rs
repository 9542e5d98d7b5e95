//! Reference models shared by the integration tests.
//!
//! Everything here is written independently of the library internals: the
//! tests compare the real implementation against these models.

#![allow(dead_code)]

pub mod buddy;
pub mod fuzz;
pub mod gen;
pub mod ledger;
pub mod lru;
pub mod refvm;
pub mod services;
