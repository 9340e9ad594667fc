pub mod budget;
pub mod decoder;
pub mod gradcheck;
pub mod prompt;
pub mod rope;
pub mod store;
pub mod tensor;
pub mod token;
pub mod toy;
