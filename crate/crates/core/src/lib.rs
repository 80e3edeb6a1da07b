pub mod actors;
pub mod codec;
pub mod crypto;
pub mod ledger;
pub mod obm;
pub mod scenario;
pub mod simnet;
pub mod vehicle;
