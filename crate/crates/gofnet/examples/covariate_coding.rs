//! Turn per-node descriptors into edge covariates.
//!
//! Quantitative columns become absolute differences, ordinal columns a set
//! of distance indicators, and qualitative columns a pair of same/different
//! indicators per level.
//!
//! ```sh
//! cargo run --example covariate_coding
//! ```

use gofnet::graph::{
    code_covariates, CodingOptions, ColumnKind, DescriptorColumn, NodeDescriptorTable,
};

fn main() -> anyhow::Result<()> {
    let names = ["ann", "bob", "cal", "dee"];
    let table = NodeDescriptorTable::new(
        4,
        vec![
            DescriptorColumn {
                name: "age".into(),
                kind: ColumnKind::Quantitative,
                values: ["34", "41", "29", "36"]
                    .iter()
                    .map(|v| Some(v.to_string()))
                    .collect(),
            },
            DescriptorColumn {
                name: "grade".into(),
                kind: ColumnKind::Ordinal { levels: 3 },
                values: ["1", "3", "2", "1"].iter().map(|v| Some(v.to_string())).collect(),
            },
            DescriptorColumn {
                name: "team".into(),
                kind: ColumnKind::Qualitative {
                    levels: vec!["red".into(), "blue".into()],
                },
                values: ["red", "red", "blue", "red"]
                    .iter()
                    .map(|v| Some(v.to_string()))
                    .collect(),
            },
        ],
    )?;

    let tensor = code_covariates(&table, None, CodingOptions::default())?;
    println!(
        "coded {} node columns into {} edge covariates\n",
        table.columns().len(),
        tensor.d()
    );
    println!("columns: |age diff|, grade dist 1, grade dist 2,");
    println!("         both red, one red, both blue, one blue\n");
    for i in 0..4 {
        for j in (i + 1)..4 {
            println!("{:>3} - {:<3} {:?}", names[i], names[j], tensor.get(i, j));
        }
    }
    Ok(())
}
