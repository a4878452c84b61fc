//! Distributed Davidson matvec over stateless mini-task bundles.
//!
//! The matvec decomposes into per-row, per-excitation-type channels packed
//! into mini-tasks and bundles ([`channel`], [`exec`]). Row-owning factories
//! ([`factory`]) dispatch bundles over plain HTTP to stateless workers
//! ([`worker`]), aggregate the returned contributions exactly once, keep the
//! Krylov basis out of core ([`ooc`]), and checkpoint the best Ritz pair for
//! restart ([`checkpoint`]).

pub mod channel;
pub mod checkpoint;
pub mod exec;
pub mod factory;
pub mod httpx;
pub mod ooc;
pub mod payload;
pub mod reduce;
pub mod worker;
