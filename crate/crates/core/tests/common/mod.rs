#![allow(dead_code)]

pub mod loss_cases;
pub mod op_cases;
