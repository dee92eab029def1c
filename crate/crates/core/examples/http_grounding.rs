//! Ground an image through the chat-completions client.
//!
//! Without arguments a local stub server answers; pass a base URL and a
//! model name to talk to a real vision-language endpoint.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;

use ddl_core::lvlm_client::{ground, ChatClient, ModelEndpoint};
use ddl_core::viewgen::RasterImage;
use ddl_core::ImageDims;

/// Serves `n` requests with a fixed completion, then exits.
fn stub_server(n: usize) -> std::io::Result<String> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let url = format!("http://{}", listener.local_addr()?);
    std::thread::spawn(move || {
        for stream in listener.incoming().take(n).flatten() {
            let mut reader = BufReader::new(stream);
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap_or(0);
                }
            }
            let mut body = vec![0; len];
            let _ = reader.read_exact(&mut body);
            let answer =
                r#"```json\n[{\"bbox_2d\": [40, 52, 88, 96], \"label\": \"lesion\"}]\n```"#;
            let payload = format!(r#"{{"choices":[{{"message":{{"content":"{answer}"}}}}]}}"#);
            let mut stream = reader.into_inner();
            let _ = write!(
                stream,
                "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{payload}",
                payload.len()
            );
        }
    });
    Ok(url)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let endpoint = match (args.next(), args.next()) {
        (Some(url), Some(model)) => ModelEndpoint::new(url, model),
        _ => ModelEndpoint::new(stub_server(1)?, "stub"),
    };
    let dims = ImageDims::new(128, 128)?;
    let pixels: Vec<u8> = (0..128 * 128).map(|i| ((i % 128) * 2) as u8).collect();
    let image = RasterImage::new(dims, 1, pixels, "gradient")?;

    let client = ChatClient::new(endpoint)?;
    let set = ground(&client, &image, ddl_core::dape::VANILLA_PROMPT, 0.0)?;
    println!("raw: {}", set.raw_response);
    for d in &set.detections {
        println!("{} {:?}", d.label, d.bbox.to_array());
    }
    Ok(())
}
