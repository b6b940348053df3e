pub mod gradcheck;
pub mod suites;
