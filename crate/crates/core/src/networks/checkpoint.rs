use indexmap::IndexMap;
use ndarray::{Array1, Array3};
use serde::{Deserialize, Serialize};

use super::{NetworkInstance, NetworkSpec};
use crate::error::{ensure, Error, Result};
use crate::layers::NormMode;

const MAGIC: &[u8] = b"TSGANCKPT\n";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    spec: NetworkSpec,
    seed: u64,
    mode: NormMode,
    params: Vec<Entry>,
    buffers: Vec<Entry>,
    payload_len: usize,
}

pub(crate) fn encode(inst: &NetworkInstance) -> Result<Vec<u8>> {
    let mut payload: Vec<f32> = Vec::new();
    let mut entry =
        |name: &str, shape: Vec<usize>, values: &mut dyn Iterator<Item = f64>| -> Result<Entry> {
            let offset = payload.len();
            for v in values {
                let x = v as f32;
                ensure!(
                    x as f64 == v,
                    Config,
                    "{name} holds a value not representable in single precision"
                );
                payload.push(x);
            }
            Ok(Entry {
                name: name.to_string(),
                shape,
                offset,
            })
        };
    let mut params = Vec::with_capacity(inst.params.len());
    for (name, a) in &inst.params {
        params.push(entry(name, a.shape().to_vec(), &mut a.iter().copied())?);
    }
    let mut buffers = Vec::with_capacity(inst.buffers.len());
    for (name, a) in &inst.buffers {
        buffers.push(entry(name, vec![a.len()], &mut a.iter().copied())?);
    }
    let header = Header {
        version: VERSION,
        spec: inst.spec.clone(),
        seed: inst.seed,
        mode: inst.mode,
        params,
        buffers,
        payload_len: payload.len(),
    };
    let mut out = MAGIC.to_vec();
    out.extend(serde_json::to_vec(&header)?);
    out.push(b'\n');
    for x in payload {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub(crate) fn decode(bytes: &[u8]) -> Result<NetworkInstance> {
    ensure!(bytes.starts_with(MAGIC), Parse, "not a checkpoint file");
    let rest = &bytes[MAGIC.len()..];
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Parse("missing checkpoint header".into()))?;
    let header: Header = serde_json::from_slice(&rest[..nl])?;
    ensure!(
        header.version == VERSION,
        Parse,
        "unsupported checkpoint version {}",
        header.version
    );
    let data = &rest[nl + 1..];
    ensure!(
        data.len() == 4 * header.payload_len,
        Parse,
        "payload has {} bytes, header declares {} values",
        data.len(),
        header.payload_len
    );
    let values: Vec<f64> = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let take = |e: &Entry| -> Result<Vec<f64>> {
        let n: usize = e.shape.iter().product();
        ensure!(
            e.offset + n <= values.len(),
            Parse,
            "entry {} runs past the payload",
            e.name
        );
        Ok(values[e.offset..e.offset + n].to_vec())
    };
    let mut params = IndexMap::new();
    for e in &header.params {
        ensure!(
            e.shape.len() == 3,
            Parse,
            "parameter {} is not rank 3",
            e.name
        );
        let a = Array3::from_shape_vec((e.shape[0], e.shape[1], e.shape[2]), take(e)?)
            .map_err(|err| Error::Parse(err.to_string()))?;
        params.insert(e.name.clone(), a);
    }
    let mut buffers = IndexMap::new();
    for e in &header.buffers {
        buffers.insert(e.name.clone(), Array1::from(take(e)?));
    }
    let inst = NetworkInstance {
        spec: header.spec,
        params,
        buffers,
        seed: header.seed,
        mode: header.mode,
    };
    let expected = match &inst.spec {
        NetworkSpec::Generator(s) => super::build_generator(s, inst.seed)?,
        NetworkSpec::Discriminator(s) => super::build_discriminator(s, inst.seed)?,
    };
    ensure!(
        expected.params.len() == inst.params.len()
            && expected
                .params
                .iter()
                .all(|(k, v)| inst.params.get(k).is_some_and(|p| p.dim() == v.dim())),
        Parse,
        "checkpoint parameters do not match the stored spec"
    );
    Ok(inst)
}
