pub mod eval;
pub mod fixture;
pub mod merge;
pub mod mix;
pub mod similarity;
pub mod validate;
