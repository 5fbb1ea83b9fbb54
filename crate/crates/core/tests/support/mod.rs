pub mod gradcheck;
pub mod suite;
