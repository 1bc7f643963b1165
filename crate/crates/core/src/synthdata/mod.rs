//! Paired image/caption datasets: synthetic generation with class and
//! attribute structure, a fixed-vocabulary tokenizer, and CIFAR-10 ingestion.

mod cifar;
mod dataset;
mod vocab;

pub use cifar::{load_cifar10, read_cifar10, write_cifar10, CIFAR10_CLASSES, CIFAR_RECORD_LEN};
pub use dataset::{gen_dataset, load_dataset, save_dataset, PairedDataset, SynthSpec, CAPTION_TEMPLATES};
pub use vocab::{detokenize, tokenize, TokenSeq, Vocab, ATTRIBUTE_GROUPS, MAX_CAPTION_LEN, UNK_TOKEN};
