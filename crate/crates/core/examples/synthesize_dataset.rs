//! Generate a synthetic person-search dataset and print its census.
//!
//! ```sh
//! cargo run --release --example synthesize_dataset -- /tmp/ps-data
//! ```

use persearch::data::{generate_synthetic, Split, SynthConfig};

fn main() -> persearch::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "/tmp/ps-data".to_string());
    let cfg = SynthConfig::default();
    let ds = generate_synthetic(&cfg)?;

    println!(
        "{} images: {} train / {} gallery / {} query",
        ds.num_images(),
        ds.split_indices(Split::Train).len(),
        ds.split_indices(Split::Gallery).len(),
        ds.split_indices(Split::Query).len(),
    );
    println!("{} labeled identities, {} person instances", ds.num_labeled(), ds.doc.persons.len());

    for id in 0..ds.num_labeled() as i64 {
        let train = ds
            .doc
            .persons
            .iter()
            .filter(|p| {
                p.identity == id
                    && ds.image_index(p.image_id)
                        .map(|i| ds.doc.images[i].split == Split::Train)
                        .unwrap_or(false)
            })
            .count();
        let gallery = ds
            .doc
            .persons
            .iter()
            .filter(|p| {
                p.identity == id
                    && ds.image_index(p.image_id)
                        .map(|i| ds.doc.images[i].split == Split::Gallery)
                        .unwrap_or(false)
            })
            .count();
        println!("identity {id}: {train} train views, {gallery} gallery views");
    }

    let unlabeled = ds.doc.persons.iter().filter(|p| p.identity < 0).count();
    println!("{unlabeled} unlabeled distractor instances");

    ds.save(std::path::Path::new(&out))?;
    println!("saved to {out}");
    Ok(())
}
