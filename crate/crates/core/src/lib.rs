pub mod forms;
pub mod g2;
pub mod flows;
pub mod grid;
pub mod symbol;
pub mod cli;
pub mod validate;
