//! Zero-trust, knowledge-based challenge-response authentication.
//!
//! A user is assigned a secret boolean formula over concepts of a semantic
//! knowledge base. To authenticate they answer, for a fixed number of
//! attributes, whether each attribute is related to their secret. The
//! number of challenges is derived from a guessing threshold and an error
//! allowance; the verdict is only reached after the last answer.

pub mod attacker;
pub mod challenge;
pub mod kb;
pub mod secret;
pub mod service;
pub mod sim;
pub mod stats;
pub mod verifier;

pub use challenge::{Challenge, ChallengePlan, RecycleEvent};
pub use kb::KnowledgeBase;
pub use secret::{SecretFormula, TruthTable};
pub use service::AuthService;
pub use verifier::{SecurityPolicy, Verdict};

/// A readable balanced secret for the bundled knowledge base (42 of 84
/// attributes answer yes).
pub const DEMO_SECRET: &str = "OR(yellow, OR(water, metal))";

/// Derives an independent 64-bit seed for `stream` from `seed` (splitmix64).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
