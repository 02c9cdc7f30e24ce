use std::path::Path;

use aikd::data::{load_dataset, DataSource, DatasetManifest, Normalization};
use aikd::Error;
use image::{Rgb, RgbImage};

const CLASSES: [(&str, [u8; 3]); 3] = [("cat", [200, 10, 10]), ("dog", [10, 200, 10]), ("eel", [10, 10, 200])];

fn write_tree(root: &Path) {
    for (split, per_class) in [("train", 2), ("val", 1)] {
        for (name, colour) in CLASSES {
            let dir = root.join(split).join(name);
            std::fs::create_dir_all(&dir).unwrap();
            for i in 0..per_class {
                let mut img = RgbImage::from_pixel(20, 14, Rgb(colour));
                // A marker outside the centre crop must not survive.
                img.put_pixel(0, 0, Rgb([255, 255, 255]));
                img.save(dir.join(format!("{i}.png"))).unwrap();
            }
        }
    }
}

fn manifest() -> DatasetManifest {
    DatasetManifest {
        name: "toy".into(),
        num_classes: 3,
        train_count: 6,
        val_count: 3,
        resolution: 8,
        normalization: Normalization::IDENTITY,
        source: DataSource::ImageFolder,
        cifar: None,
        load_resolution: None,
        synthetic: None,
    }
}

#[test]
fn folders_load_in_sorted_order() {
    let dir = tempfile::tempdir().unwrap();
    write_tree(dir.path());
    let ds = load_dataset(&manifest(), dir.path()).unwrap();
    assert_eq!(ds.train.labels(), &[0, 0, 1, 1, 2, 2]);
    assert_eq!(ds.val.labels(), &[0, 1, 2]);
    assert_eq!(ds.train.resolution(), 8);
    for (i, &label) in ds.train.labels().iter().enumerate() {
        let bytes = ds.train.image_bytes(i);
        assert_eq!(bytes.len(), 3 * 64);
        for c in 0..3 {
            assert!(bytes[c * 64..(c + 1) * 64].iter().all(|&b| b == CLASSES[label].1[c]));
        }
    }
    let again = load_dataset(&manifest(), dir.path()).unwrap();
    assert_eq!(again.train, ds.train);
    assert_eq!(again.val, ds.val);
}

#[test]
fn inconsistent_trees_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_tree(dir.path());
    let wrong_count = DatasetManifest { train_count: 7, ..manifest() };
    assert!(matches!(load_dataset(&wrong_count, dir.path()), Err(Error::Dataset(_))));
    let wrong_classes = DatasetManifest { num_classes: 4, ..manifest() };
    assert!(matches!(load_dataset(&wrong_classes, dir.path()), Err(Error::Dataset(_))));
    std::fs::create_dir_all(dir.path().join("val/fox")).unwrap();
    assert!(load_dataset(&manifest(), dir.path()).is_err());
    assert!(load_dataset(&manifest(), &dir.path().join("missing")).is_err());
}
