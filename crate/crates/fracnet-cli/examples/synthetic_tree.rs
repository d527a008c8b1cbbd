//! Writes a small synthetic two-class dataset tree for trying the pipeline
//! without any real data:
//!
//! ```text
//! cargo run -p fracnet-cli --example synthetic_tree -- /tmp/xray_tree 32
//! ```

use std::path::PathBuf;

fn main() {
    let mut args = std::env::args().skip(1);
    let root = PathBuf::from(args.next().unwrap_or_else(|| "synthetic_tree".into()));
    let per_class: u64 = args
        .next()
        .and_then(|s| s.parse().ok())
        .unwrap_or(16)
        .max(1);

    for (dir, class) in [("Fractured", 1usize), ("Non_fractured", 0usize)] {
        let d = root.join(dir);
        std::fs::create_dir_all(&d).expect("create class directory");
        for i in 0..per_class {
            let raw = fracnet::synthetic::textured_image(64, class, 9000 + i * 17 + class as u64);
            let img = image::GrayImage::from_raw(64, 64, raw).expect("image buffer");
            img.save(d.join(format!("img{i:03}.png")))
                .expect("save png");
        }
    }
    println!(
        "wrote {} images per class under {}",
        per_class,
        root.display()
    );
}
