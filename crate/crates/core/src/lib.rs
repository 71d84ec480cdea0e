pub mod chem;
pub mod corpus;
pub mod descriptors;
pub mod eval;
pub mod model;
pub mod params;
pub mod selfcheck;
pub mod tensor;
pub mod train;
pub mod transformer;
