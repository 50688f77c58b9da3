//! Reversible link transactions with indefinite causal order.
//!
//! A point-to-point duplex link whose transactions move through
//! `TENTATIVE -> REFLECTING -> COMMITTED` (or abort before commitment),
//! together with:
//!
//! * [`ilt`]: the four-valued causal relation and per-link tensor clocks,
//! * [`link_fsm`]: the six-state endpoint machine,
//! * [`kbp`]: the ontic/epistemic register pair of each link,
//! * [`transaction`]: payloads, interpreted digests, frames and the visible store,
//! * [`netsim`]: a deterministic discrete-event simulator with fault injection,
//! * [`fito`]: a completion-on-placement baseline used for contrast,
//! * [`analysis`]: the trace auditor and the definite-order projection,
//! * [`consensus`]: compare-and-swap consensus carried over link transactions.

pub mod analysis;
pub mod consensus;
pub mod fito;
pub mod ids;
pub mod ilt;
pub mod kbp;
pub mod link_fsm;
pub mod netsim;
pub mod trace;
pub mod transaction;
pub mod workload;

pub use ids::{Endpoint, Tick, TxnId};
