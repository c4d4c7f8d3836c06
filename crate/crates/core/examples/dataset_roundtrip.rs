//! Generates both dataset families, writes them to disk and reads them back.
//!
//! Usage: `dataset_roundtrip [dir]`

use std::path::PathBuf;

use ebmmoe::data::{generate, load_dataset, save_dataset, DatasetFamily, DatasetSpec};

fn main() -> ebmmoe::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(std::env::temp_dir);
    for family in [DatasetFamily::GmmPair, DatasetFamily::BitmapDigits] {
        let spec = DatasetSpec {
            family,
            ..DatasetSpec::default()
        };
        let (train, _) = generate(&spec)?;
        let path = dir.join(format!("{family:?}.mmds").to_lowercase());
        save_dataset(&train, &path)?;
        let back = load_dataset(&path)?;
        println!(
            "{family:?}: {} examples, {} modalities, round trip {}",
            train.len(),
            train.modalities(),
            if back == train { "exact" } else { "differs" }
        );
    }
    Ok(())
}
