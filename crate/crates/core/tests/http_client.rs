use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use passtune::model_client::{ClientError, HttpClient, InferenceEndpoint, TextGenerator, TRANSPORT_RETRIES};

/// Serves one canned `(status, body)` per connection and records request bodies.
fn serve(responses: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<String>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    thread::spawn(move || {
        for (status, body) in responses {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut length = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
            }
            let mut request = vec![0; length];
            reader.read_exact(&mut request).unwrap();
            log.lock().unwrap().push(String::from_utf8(request).unwrap());
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (url, seen)
}

fn endpoint(url: String) -> InferenceEndpoint {
    let mut e = InferenceEndpoint::new(url);
    e.model = "tiny".into();
    e.timeout_secs = 10;
    e
}

#[test]
fn retries_server_errors_then_reads_the_reply() {
    let ok = r#"{"choices":[{"message":{"content":"`opt -p 'module(default<Oz>)'`"}}]}"#;
    let (url, seen) = serve(vec![(503, "{}".into()), (502, "{}".into()), (200, ok.into())]);
    let client = HttpClient::new(endpoint(url)).unwrap();
    assert_eq!(client.generate("hello").unwrap(), "`opt -p 'module(default<Oz>)'`");
    let bodies = seen.lock().unwrap();
    assert_eq!(bodies.len(), 3);
    let req: serde_json::Value = serde_json::from_str(&bodies[0]).unwrap();
    assert_eq!(req["model"], "tiny");
    assert_eq!(req["messages"][0]["content"], "hello");
}

#[test]
fn gives_up_after_the_retry_budget() {
    let (url, _) = serve(vec![(500, "{}".into()); TRANSPORT_RETRIES + 1]);
    let client = HttpClient::new(endpoint(url)).unwrap();
    match client.generate("x") {
        Err(ClientError::Transport { attempts, .. }) => assert_eq!(attempts, TRANSPORT_RETRIES + 1),
        other => panic!("{other:?}"),
    }
}

#[test]
fn malformed_responses_are_not_retried() {
    let (url, seen) = serve(vec![(200, r#"{"unexpected":true}"#.into())]);
    let client = HttpClient::new(endpoint(url)).unwrap();
    assert!(matches!(client.generate("x"), Err(ClientError::Response(_))));
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn custom_template_and_pointer() {
    let (url, seen) = serve(vec![(200, r#"{"output":{"text":"hi"}}"#.into())]);
    let mut e = endpoint(url);
    e.body_template = Some(serde_json::json!({"prompt": "{{prompt}}", "n": "{{max_tokens}}"}));
    e.response_pointer = "/output/text".into();
    let client = HttpClient::new(e).unwrap();
    assert_eq!(client.generate("p").unwrap(), "hi");
    let req: serde_json::Value = serde_json::from_str(&seen.lock().unwrap()[0]).unwrap();
    assert_eq!(req, serde_json::json!({"prompt": "p", "n": 4096}));
}

#[test]
fn missing_auth_variable_is_an_error() {
    let mut e = InferenceEndpoint::new("http://127.0.0.1:9");
    e.auth_env = Some("PASSTUNE_TEST_SURELY_UNSET_TOKEN".into());
    assert!(matches!(HttpClient::new(e), Err(ClientError::Endpoint(_))));
}
