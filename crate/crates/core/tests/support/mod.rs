#![allow(dead_code)]

pub mod pager_fuzz;
pub mod radix_oracle;
