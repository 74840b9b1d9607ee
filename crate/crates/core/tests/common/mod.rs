pub mod fk_oracle;
