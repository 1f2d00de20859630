//! Hand-built IDX and CIFAR-10 fixtures and malformed variants, shared by
//! the core test suite and the acceptance runner. Each case returns a
//! description of the first discrepancy.

#![allow(dead_code)]

use std::fs;
use std::path::Path;

use lowbit::data::{load_cifar10, load_mnist, parse_cifar, parse_idx, Split, CIFAR_TEST_FILE, MNIST_FILES};
use lowbit::Error;

pub type Case = fn() -> Result<(), String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Big-endian IDX bytes written out field by field.
fn idx(magic: [u8; 4], dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut b = magic.to_vec();
    for d in dims {
        b.extend_from_slice(&d.to_be_bytes());
    }
    b.extend_from_slice(payload);
    b
}

const IMAGES: [u8; 4] = [0, 0, 8, 3];
const LABELS: [u8; 4] = [0, 0, 8, 1];

fn mnist_dir(train_n: u32, train_labels: &[u8], test_n: u32, test_labels: &[u8]) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let px = |n: u32| -> Vec<u8> {
        (0..n as usize * 784)
            .map(|i| if (i % 784).is_multiple_of(3) { 255 } else { 0 })
            .collect()
    };
    let files = [
        idx(IMAGES, &[train_n, 28, 28], &px(train_n)),
        idx(LABELS, &[train_labels.len() as u32], train_labels),
        idx(IMAGES, &[test_n, 28, 28], &px(test_n)),
        idx(LABELS, &[test_labels.len() as u32], test_labels),
    ];
    for (name, bytes) in MNIST_FILES.iter().zip(files) {
        fs::write(dir.path().join(name), bytes).unwrap();
    }
    dir
}

fn format_error(r: Result<impl std::fmt::Debug, Error>, file: &str, needle: &str) -> Result<(), String> {
    match r {
        Err(Error::Format { path, msg }) => {
            ensure(path.to_string_lossy().contains(file) && msg.contains(needle), || {
                format!("error names {} / `{msg}`, expected {file} / `{needle}`", path.display())
            })
        }
        Err(e) => Err(format!("expected a format error about `{needle}`, got {e}")),
        Ok(v) => Err(format!("expected a format error about `{needle}`, parsed {v:?}")),
    }
}

pub fn idx_two_images() -> Result<(), String> {
    let bytes = idx(IMAGES, &[2, 1, 2], &[0, 255, 255, 0]);
    let (dims, payload) = parse_idx(Path::new("f"), &bytes, 0x803).map_err(|e| e.to_string())?;
    ensure(dims == [2, 1, 2] && payload == [0, 255, 255, 0], || {
        format!("{dims:?} {payload:?}")
    })
}

pub fn mnist_fixture_values() -> Result<(), String> {
    let dir = mnist_dir(2, &[3, 9], 1, &[0]);
    let (train, test) = load_mnist(dir.path()).map_err(|e| e.to_string())?;
    ensure(train.len() == 2 && test.len() == 1, || "sizes".into())?;
    ensure(train.labels() == [3, 9] && test.labels() == [0], || "labels".into())?;
    ensure(train.split() == Split::Train && test.split() == Split::Test, || {
        "splits".into()
    })?;
    let t = train.images::<f32>();
    ensure(t.shape() == [2, 1, 28, 28], || format!("shape {:?}", t.shape()))?;
    let expected = |i: usize| if (i % 784).is_multiple_of(3) { 1.0 } else { 0.0 };
    ensure(t.data().iter().enumerate().all(|(i, &v)| v == expected(i)), || {
        "pixel values".into()
    })?;
    // both training images are identical, so the mean equals either one
    ensure(
        train
            .mean_image()
            .iter()
            .enumerate()
            .all(|(i, &m)| m == expected(i) as f64),
        || "mean".into(),
    )?;
    ensure(test.mean_image() == train.mean_image(), || {
        "test split uses the training mean".into()
    })
}

pub fn mnist_bad_magic() -> Result<(), String> {
    let dir = mnist_dir(1, &[1], 1, &[1]);
    let p = dir.path().join(MNIST_FILES[0]);
    let mut b = fs::read(&p).unwrap();
    b[3] = 0x01;
    fs::write(&p, b).unwrap();
    format_error(load_mnist(dir.path()), MNIST_FILES[0], "expected 0x00000803")
}

pub fn mnist_truncated_header() -> Result<(), String> {
    let dir = mnist_dir(1, &[1], 1, &[1]);
    fs::write(dir.path().join(MNIST_FILES[1]), [0u8, 0, 8]).unwrap();
    format_error(load_mnist(dir.path()), MNIST_FILES[1], "truncated")
}

pub fn mnist_truncated_payload() -> Result<(), String> {
    let dir = mnist_dir(2, &[1, 2], 1, &[1]);
    let p = dir.path().join(MNIST_FILES[0]);
    let b = fs::read(&p).unwrap();
    fs::write(&p, &b[..b.len() - 5]).unwrap();
    format_error(load_mnist(dir.path()), MNIST_FILES[0], "truncated")
}

pub fn mnist_trailing_bytes() -> Result<(), String> {
    let dir = mnist_dir(1, &[1], 1, &[1]);
    let p = dir.path().join(MNIST_FILES[3]);
    let mut b = fs::read(&p).unwrap();
    b.push(4);
    fs::write(&p, b).unwrap();
    format_error(load_mnist(dir.path()), MNIST_FILES[3], "oversized")
}

pub fn mnist_count_mismatch() -> Result<(), String> {
    let dir = mnist_dir(2, &[1, 2, 3], 1, &[1]);
    format_error(load_mnist(dir.path()), MNIST_FILES[1], "count mismatch")
}

pub fn mnist_label_out_of_range() -> Result<(), String> {
    let dir = mnist_dir(1, &[1], 1, &[10]);
    format_error(load_mnist(dir.path()), MNIST_FILES[3], "label 10")
}

pub fn mnist_wrong_image_size() -> Result<(), String> {
    let dir = mnist_dir(1, &[1], 1, &[1]);
    fs::write(dir.path().join(MNIST_FILES[2]), idx(IMAGES, &[1, 2, 2], &[0; 4])).unwrap();
    format_error(load_mnist(dir.path()), MNIST_FILES[2], "28x28")
}

pub fn mnist_missing_file() -> Result<(), String> {
    let dir = mnist_dir(1, &[1], 1, &[1]);
    fs::remove_file(dir.path().join(MNIST_FILES[2])).unwrap();
    match load_mnist(dir.path()) {
        Err(Error::Io { path, .. }) => ensure(path.ends_with(MNIST_FILES[2]), || format!("{}", path.display())),
        other => Err(format!("expected an io error, got {other:?}")),
    }
}

fn record(label: u8, pixel: u8) -> Vec<u8> {
    let mut r = vec![pixel; 3073];
    r[0] = label;
    r
}

pub fn cifar_one_record() -> Result<(), String> {
    let (pixels, labels) = parse_cifar(Path::new("b"), &record(7, 255)).map_err(|e| e.to_string())?;
    ensure(
        labels == [7] && pixels.len() == 3072 && pixels.iter().all(|&p| p == 255),
        || "record".into(),
    )
}

pub fn cifar_fixture_values() -> Result<(), String> {
    let dir = tempfile::tempdir().unwrap();
    let train = [record(7, 255), record(2, 0)].concat();
    fs::write(dir.path().join("data_batch_1.bin"), &train).unwrap();
    fs::write(dir.path().join("data_batch_3.bin"), record(9, 51)).unwrap();
    fs::write(dir.path().join(CIFAR_TEST_FILE), record(1, 255)).unwrap();
    let (train, test) = load_cifar10(dir.path()).map_err(|e| e.to_string())?;
    ensure(train.len() == 3 && train.labels() == [7, 2, 9], || {
        format!("train labels {:?}", train.labels())
    })?;
    let t = train.images::<f64>();
    ensure(t.shape() == [3, 3, 32, 32], || format!("shape {:?}", t.shape()))?;
    let first = &t.data()[..3072];
    ensure(first.iter().all(|&v| v == 1.0), || "first image all ones".into())?;
    let expected_mean = (1.0 + 0.0 + 0.2) / 3.0;
    ensure(
        train.mean_image().iter().all(|&m| (m - expected_mean).abs() < 1e-12),
        || format!("mean {}", train.mean_image()[0]),
    )?;
    ensure(test.len() == 1 && test.labels() == [1], || "test split".into())
}

pub fn cifar_truncated_record() -> Result<(), String> {
    let dir = tempfile::tempdir().unwrap();
    let mut b = [record(1, 0), record(2, 0)].concat();
    b.truncate(3073 + 100);
    fs::write(dir.path().join("data_batch_1.bin"), b).unwrap();
    fs::write(dir.path().join(CIFAR_TEST_FILE), record(1, 0)).unwrap();
    format_error(load_cifar10(dir.path()), "data_batch_1.bin", "multiple of 3073")
}

pub fn cifar_empty_file() -> Result<(), String> {
    format_error(
        parse_cifar(Path::new("test_batch.bin"), &[]),
        "test_batch.bin",
        "multiple of 3073",
    )
}

pub fn cifar_label_out_of_range() -> Result<(), String> {
    let b = [record(1, 0), record(10, 0)].concat();
    format_error(
        parse_cifar(Path::new("data_batch_2.bin"), &b),
        "data_batch_2.bin",
        "label 10",
    )
}

pub fn cifar_missing_test_batch() -> Result<(), String> {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("data_batch_1.bin"), record(1, 0)).unwrap();
    match load_cifar10(dir.path()) {
        Err(Error::Io { path, .. }) => ensure(path.ends_with(CIFAR_TEST_FILE), || format!("{}", path.display())),
        other => Err(format!("expected an io error, got {other:?}")),
    }
}

pub fn cifar_missing_train_batches() -> Result<(), String> {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join(CIFAR_TEST_FILE), record(1, 0)).unwrap();
    match load_cifar10(dir.path()) {
        Err(Error::Io { .. }) => Ok(()),
        other => Err(format!("expected an io error, got {other:?}")),
    }
}

pub const CASES: &[(&str, Case)] = &[
    ("idx_two_images", idx_two_images),
    ("mnist_fixture_values", mnist_fixture_values),
    ("mnist_bad_magic", mnist_bad_magic),
    ("mnist_truncated_header", mnist_truncated_header),
    ("mnist_truncated_payload", mnist_truncated_payload),
    ("mnist_trailing_bytes", mnist_trailing_bytes),
    ("mnist_count_mismatch", mnist_count_mismatch),
    ("mnist_label_out_of_range", mnist_label_out_of_range),
    ("mnist_wrong_image_size", mnist_wrong_image_size),
    ("mnist_missing_file", mnist_missing_file),
    ("cifar_one_record", cifar_one_record),
    ("cifar_fixture_values", cifar_fixture_values),
    ("cifar_truncated_record", cifar_truncated_record),
    ("cifar_empty_file", cifar_empty_file),
    ("cifar_label_out_of_range", cifar_label_out_of_range),
    ("cifar_missing_test_batch", cifar_missing_test_batch),
    ("cifar_missing_train_batches", cifar_missing_train_batches),
];
