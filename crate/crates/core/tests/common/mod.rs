#![allow(dead_code)]

pub mod fuzz;
pub mod grad;
pub mod theory;
