pub mod dist;
pub mod error;
pub mod inspect;
pub mod par;
pub mod runtime;
pub mod sis;
pub mod trace;
pub mod net;
pub mod zoo;
