//! Bit-exact binary checkpoints for networks and cohorts.
//!
//! A network checkpoint is a versioned container holding the architecture
//! (dims, activations, residual flags, mount positions, class count) and
//! the raw little-endian doubles of every parameter, with a trailing CRC32.
//! A cohort checkpoint embeds the teacher's checkpoint bytes verbatim and
//! appends a head section, so the frozen-backbone guarantee can be checked
//! by comparing the embedded bytes against the teacher's own file.

use std::fs;
use std::path::Path;

use crate::cohort::{Cohort, IntermediateHead};
use crate::container::{read_exact_file, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::net::{Activation, Block, Network};
use crate::tensor::Tensor;

const NETWORK_MAGIC: &[u8; 8] = b"DIHNET\0\0";
const COHORT_MAGIC: &[u8; 8] = b"DIHCOH\0\0";
const FORMAT_VERSION: u32 = 1;

fn activation_tag(a: Activation) -> u8 {
    match a {
        Activation::Relu => 0,
        Activation::Identity => 1,
    }
}

fn activation_from_tag(tag: u8) -> Result<Activation> {
    match tag {
        0 => Ok(Activation::Relu),
        1 => Ok(Activation::Identity),
        other => Err(Error::MalformedHeader(format!("unknown activation tag {other}"))),
    }
}

pub fn network_to_bytes(net: &Network) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(NETWORK_MAGIC);
    w.u32(FORMAT_VERSION);
    w.u32(net.blocks().len() as u32);
    for block in net.blocks() {
        w.u32(block.input_dim() as u32);
        w.u32(block.output_dim() as u32);
        w.u8(activation_tag(block.activation));
        w.u8(block.residual as u8);
    }
    w.u32(net.final_weight().shape()[0] as u32);
    w.u32(net.num_classes() as u32);
    w.u32(net.mount_positions().len() as u32);
    for &pos in net.mount_positions() {
        w.u32(pos as u32);
    }
    for block in net.blocks() {
        for &v in block.weight.values() {
            w.f64(v);
        }
        for &v in block.bias.values() {
            w.f64(v);
        }
    }
    for &v in net.final_weight().values() {
        w.f64(v);
    }
    for &v in net.final_bias().values() {
        w.f64(v);
    }
    w.finish_with_checksum()
}

pub fn network_from_bytes(bytes: &[u8]) -> Result<Network> {
    let mut r = ByteReader::new_checked(bytes)?;
    r.expect_magic(NETWORK_MAGIC)?;
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let num_blocks = r.u32()? as usize;
    let mut arch = Vec::with_capacity(num_blocks);
    for _ in 0..num_blocks {
        let d_in = r.u32()? as usize;
        let d_out = r.u32()? as usize;
        let activation = activation_from_tag(r.u8()?)?;
        let residual = match r.u8()? {
            0 => false,
            1 => true,
            other => return Err(Error::MalformedHeader(format!("bad residual flag {other}"))),
        };
        arch.push((d_in, d_out, activation, residual));
    }
    let d_last = r.u32()? as usize;
    let num_classes = r.u32()? as usize;
    let num_mounts = r.u32()? as usize;
    let mut mounts = Vec::with_capacity(num_mounts);
    for _ in 0..num_mounts {
        mounts.push(r.u32()? as usize);
    }

    let read_tensor = |r: &mut ByteReader, shape: Vec<usize>| -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        let mut values = Vec::with_capacity(numel);
        for _ in 0..numel {
            values.push(r.f64()?);
        }
        Tensor::from_vec(shape, values)
    };

    let mut blocks = Vec::with_capacity(num_blocks);
    for &(d_in, d_out, activation, residual) in &arch {
        let weight = read_tensor(&mut r, vec![d_in, d_out])?;
        let bias = read_tensor(&mut r, vec![d_out])?;
        blocks.push(Block::new(weight, bias, activation, residual)?);
    }
    let final_weight = read_tensor(&mut r, vec![d_last, num_classes])?;
    let final_bias = read_tensor(&mut r, vec![num_classes])?;
    r.verify_checksum()?;
    Network::new(blocks, final_weight, final_bias, mounts)
}

pub fn save_network(path: impl AsRef<Path>, net: &Network) -> Result<()> {
    fs::write(path, network_to_bytes(net))?;
    Ok(())
}

pub fn load_network(path: impl AsRef<Path>) -> Result<Network> {
    network_from_bytes(&read_exact_file(path)?)
}

pub fn cohort_to_bytes(cohort: &Cohort) -> Vec<u8> {
    let teacher_bytes = network_to_bytes(cohort.teacher());
    let mut w = ByteWriter::new();
    w.bytes(COHORT_MAGIC);
    w.u32(FORMAT_VERSION);
    w.u64(teacher_bytes.len() as u64);
    w.bytes(&teacher_bytes);
    w.u32(cohort.heads().len() as u32);
    for head in cohort.heads() {
        w.u32(head.mount_index as u32);
        w.u32(head.activation_width() as u32);
        w.u32(head.num_classes() as u32);
        w.u8(activation_tag(head.activation));
        for &v in head.weight.values() {
            w.f64(v);
        }
        for &v in head.bias.values() {
            w.f64(v);
        }
    }
    w.finish_with_checksum()
}

pub fn cohort_from_bytes(bytes: &[u8]) -> Result<Cohort> {
    let mut r = ByteReader::new_checked(bytes)?;
    r.expect_magic(COHORT_MAGIC)?;
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let teacher_len = r.u64()? as usize;
    let teacher = network_from_bytes(r.raw(teacher_len)?)?;
    let num_heads = r.u32()? as usize;
    let mut heads = Vec::with_capacity(num_heads);
    for _ in 0..num_heads {
        let mount_index = r.u32()? as usize;
        let n_i = r.u32()? as usize;
        let c = r.u32()? as usize;
        let activation = activation_from_tag(r.u8()?)?;
        let mut weight = Vec::with_capacity(n_i * c);
        for _ in 0..n_i * c {
            weight.push(r.f64()?);
        }
        let mut bias = Vec::with_capacity(c);
        for _ in 0..c {
            bias.push(r.f64()?);
        }
        heads.push(IntermediateHead::new(
            Tensor::from_vec(vec![n_i, c], weight)?,
            Tensor::from_vec(vec![c], bias)?,
            activation,
            mount_index,
        )?);
    }
    r.verify_checksum()?;
    Cohort::new(teacher, heads)
}

/// The teacher's checkpoint bytes exactly as embedded in a serialized
/// cohort, for frozen-backbone byte comparisons.
pub fn embedded_teacher_bytes(cohort_bytes: &[u8]) -> Result<Vec<u8>> {
    let mut r = ByteReader::new_checked(cohort_bytes)?;
    r.expect_magic(COHORT_MAGIC)?;
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let teacher_len = r.u64()? as usize;
    let teacher = r.raw(teacher_len)?.to_vec();
    r.verify_checksum()?;
    Ok(teacher)
}

pub fn save_cohort(path: impl AsRef<Path>, cohort: &Cohort) -> Result<()> {
    fs::write(path, cohort_to_bytes(cohort))?;
    Ok(())
}

pub fn load_cohort(path: impl AsRef<Path>) -> Result<Cohort> {
    cohort_from_bytes(&read_exact_file(path)?)
}
