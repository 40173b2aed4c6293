pub mod flops_oracle;
